/** Browser glue: canvas rendering, pointer handling, and the refine loop. */

import { decodeMaskPayload, formatDice, SessionApi } from "./api.js";
import { composeOverlay, masksDiffer } from "./overlay.js";
import { decodePgm, encodePgm, Pgm } from "./pgm.js";
import { ScribbleSession } from "./state.js";
import { Pixel, rasterizeStroke } from "./stroke.js";

const api = new SessionApi("");
const session = new ScribbleSession();

let baseImage: Pgm | null = null;
let gtPgm: Uint8Array | null = null;
let drawing = false;
let currentPath: Pixel[] = [];
let refining = false;
let compareRound = -1;

const $ = <T extends HTMLElement>(id: string) => document.getElementById(id) as T;

function banner(message: string, isError = true): void {
  const el = $("banner");
  el.textContent = message;
  el.className = message ? (isError ? "banner error" : "banner info") : "banner";
}

function scale(): number {
  const canvas = $("view") as HTMLCanvasElement;
  return baseImage ? canvas.width / baseImage.width : 1;
}

function render(): void {
  if (!baseImage) return;
  const canvas = $("view") as HTMLCanvasElement;
  const ctx = canvas.getContext("2d")!;
  const live = currentPath.length
    ? rasterizeStroke(currentPath, session.brushRadius, baseImage.height, baseImage.width)
    : [];
  const layer = session.scribbleLayer();
  for (const p of live) layer.set(p.y * baseImage.width + p.x, session.activeLabel);
  const rgba = composeOverlay(
    baseImage.data,
    $("overlay-toggle") ? (($("overlay-toggle") as HTMLInputElement).checked ? session.mask : null) : session.mask,
    layer,
    baseImage.width,
    baseImage.height,
    session.overlayOpacity,
  );
  const img = new ImageData(rgba as Uint8ClampedArray<ArrayBuffer>, baseImage.width, baseImage.height);
  const off = new OffscreenCanvas(baseImage.width, baseImage.height);
  off.getContext("2d")!.putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
  renderCompare();
  updateStatus();
}

function renderCompare(): void {
  const panel = $("compare-panel");
  if (!baseImage || compareRound < 0) {
    panel.style.display = "none";
    return;
  }
  const record = session.roundHistory().find((r) => r.round === compareRound);
  if (!record) return;
  panel.style.display = "block";
  const canvas = $("compare") as HTMLCanvasElement;
  const ctx = canvas.getContext("2d")!;
  const rgba = composeOverlay(baseImage.data, record.mask, new Map(), baseImage.width,
    baseImage.height, session.overlayOpacity);
  const off = new OffscreenCanvas(baseImage.width, baseImage.height);
  off.getContext("2d")!.putImageData(new ImageData(rgba as Uint8ClampedArray<ArrayBuffer>, baseImage.width, baseImage.height), 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
  const changed = session.mask && masksDiffer(record.mask, session.mask);
  $("compare-note").textContent =
    `round ${record.round}` +
    (record.dice !== null ? ` dice ${formatDice(record.dice)}` : "") +
    (changed ? " (differs from current)" : " (identical to current)");
}

function updateStatus(): void {
  $("round").textContent = String(session.round);
  const history = session.roundHistory();
  const latest = history[history.length - 1];
  $("dice").textContent = latest && latest.dice !== null ? formatDice(latest.dice) : "-";
  const select = $("compare-select") as HTMLSelectElement;
  if (select.options.length !== history.length + 1) {
    select.innerHTML = '<option value="-1">off</option>' + history
      .map((r, i) => `<option value="${r.round}">round ${r.round}${i === history.length - 1 ? " (current)" : ""}</option>`)
      .join("");
  }
  ($("refine") as HTMLButtonElement).disabled = refining || !session.hasPending();
  ($("undo") as HTMLButtonElement).disabled = !session.hasPending();
}

async function diceIfGt(): Promise<number | null> {
  if (!gtPgm || !session.sessionId) return null;
  try {
    const res = await api.evalDice(session.sessionId, gtPgm);
    return res.dice;
  } catch {
    return null;
  }
}

async function loadImage(file: File): Promise<void> {
  try {
    const bytes = new Uint8Array(await file.arrayBuffer());
    let pgm: Pgm;
    if (file.name.endsWith(".pgm")) {
      pgm = decodePgm(bytes);
    } else {
      pgm = await rasterToPgm(bytes);
    }
    const created = await api.createSession(encodePgm(pgm));
    baseImage = pgm;
    const { mask } = decodeMaskPayload(created.mask!);
    session.start(created.session_id, pgm.height, pgm.width, mask);
    const d = await diceIfGt();
    if (d !== null) session.roundHistory()[0].dice = d;
    const canvas = $("view") as HTMLCanvasElement;
    const zoom = Math.max(1, Math.floor(512 / pgm.width));
    canvas.width = pgm.width * zoom;
    canvas.height = pgm.height * zoom;
    ($("compare") as HTMLCanvasElement).width = pgm.width * zoom;
    ($("compare") as HTMLCanvasElement).height = pgm.height * zoom;
    history.replaceState(null, "", `#${created.session_id}`);
    banner(`session ${created.session_id.slice(0, 8)} started`, false);
    render();
  } catch (e: any) {
    banner(`could not start session: ${e.message ?? e}`);
  }
}

async function rasterToPgm(bytes: Uint8Array): Promise<Pgm> {
  const blob = new Blob([bytes as BlobPart]);
  const bitmap = await createImageBitmap(blob);
  const off = new OffscreenCanvas(bitmap.width, bitmap.height);
  const ctx = off.getContext("2d")!;
  ctx.drawImage(bitmap, 0, 0);
  const rgba = ctx.getImageData(0, 0, bitmap.width, bitmap.height).data;
  const gray = new Uint8Array(bitmap.width * bitmap.height);
  for (let i = 0; i < gray.length; i++) {
    gray[i] = Math.round(
      0.299 * rgba[i * 4] + 0.587 * rgba[i * 4 + 1] + 0.114 * rgba[i * 4 + 2]);
  }
  return { width: bitmap.width, height: bitmap.height, data: gray };
}

async function restoreFromHash(): Promise<void> {
  const sid = location.hash.slice(1);
  if (!sid) return;
  try {
    const state = await api.getSession(sid);
    const imgRes = await fetch(`/sessions/${sid}/image`).catch(() => null);
    const { mask, pgm } = decodeMaskPayload(state.mask);
    baseImage = imgRes && imgRes.ok
      ? decodePgm(new Uint8Array(await imgRes.arrayBuffer()))
      : { width: pgm.width, height: pgm.height, data: new Uint8Array(pgm.width * pgm.height) };
    session.start(sid, pgm.height, pgm.width, mask);
    session.round = state.session.round;
    banner(`restored session ${sid.slice(0, 8)} (round ${state.session.round})`, false);
    render();
  } catch (e: any) {
    banner(`could not restore session: ${e.message ?? e}`);
  }
}

async function refine(): Promise<void> {
  if (!session.sessionId || refining || !session.hasPending()) return;
  refining = true;
  updateStatus();
  const items = session.pendingItems();
  try {
    await api.submitScribbles(session.sessionId, items);
    session.markFlushed();
    const result = await api.refine(session.sessionId);
    if (!result.no_op && result.mask) {
      const { mask } = decodeMaskPayload(result.mask);
      session.applyServerMask(mask, result.round, await diceIfGt());
    }
    banner("", false);
  } catch (e: any) {
    banner(`refine failed, strokes kept for retry: ${e.message ?? e}`);
  } finally {
    refining = false;
    render();
  }
}

function canvasPixel(ev: MouseEvent): Pixel {
  const canvas = $("view") as HTMLCanvasElement;
  const rect = canvas.getBoundingClientRect();
  const s = scale();
  return {
    y: Math.floor((ev.clientY - rect.top) / s),
    x: Math.floor((ev.clientX - rect.left) / s),
  };
}

export function init(): void {
  const canvas = $("view") as HTMLCanvasElement;
  canvas.addEventListener("mousedown", (ev) => {
    if (!baseImage) return;
    drawing = true;
    currentPath = [canvasPixel(ev)];
    render();
  });
  canvas.addEventListener("mousemove", (ev) => {
    if (!drawing) return;
    currentPath.push(canvasPixel(ev));
    render();
  });
  const finish = () => {
    if (!drawing || !baseImage) return;
    drawing = false;
    session.addStroke({
      pixels: rasterizeStroke(currentPath, session.brushRadius, baseImage.height, baseImage.width),
      label: session.activeLabel,
    });
    currentPath = [];
    render();
  };
  canvas.addEventListener("mouseup", finish);
  canvas.addEventListener("mouseleave", finish);

  $("file").addEventListener("change", (ev) => {
    const input = ev.target as HTMLInputElement;
    if (input.files?.length) void loadImage(input.files[0]);
  });
  $("gt-file").addEventListener("change", async (ev) => {
    const input = ev.target as HTMLInputElement;
    if (input.files?.length) {
      gtPgm = new Uint8Array(await input.files[0].arrayBuffer());
      const d = await diceIfGt();
      const hist = session.roundHistory();
      if (d !== null && hist.length) hist[hist.length - 1].dice = d;
      render();
    }
  });
  $("refine").addEventListener("click", () => void refine());
  $("undo").addEventListener("click", () => {
    session.undo();
    render();
  });
  $("label-fg").addEventListener("click", () => {
    session.activeLabel = 1;
    $("label-fg").classList.add("active");
    $("label-bg").classList.remove("active");
  });
  $("label-bg").addEventListener("click", () => {
    session.activeLabel = 0;
    $("label-bg").classList.add("active");
    $("label-fg").classList.remove("active");
  });
  $("brush").addEventListener("input", (ev) => {
    session.brushRadius = Number((ev.target as HTMLInputElement).value);
    $("brush-value").textContent = String(session.brushRadius);
  });
  $("opacity").addEventListener("input", (ev) => {
    session.overlayOpacity = Number((ev.target as HTMLInputElement).value) / 100;
    render();
  });
  $("overlay-toggle").addEventListener("change", () => render());
  $("compare-select").addEventListener("change", (ev) => {
    compareRound = Number((ev.target as HTMLSelectElement).value);
    render();
  });
  void restoreFromHash();
}

if (typeof document !== "undefined") {
  document.addEventListener("DOMContentLoaded", init);
}
