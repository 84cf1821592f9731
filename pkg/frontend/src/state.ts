/** Client-side session state: stroke log with undo/redo, pending scribbles,
 * and the server-owned displayed mask.
 *
 * Strokes accumulate locally and are only sent when the user refines
 * (flush-on-refine); undo before a flush means the server never sees the
 * stroke. The displayed mask is always byte-for-byte the last server
 * response; the client never edits it locally.
 */

import { Pixel } from "./stroke.js";
import { ScribbleItem } from "./api.js";

export type Label = 0 | 1;

export interface Stroke {
  pixels: Pixel[];
  label: Label;
}

export interface RoundRecord {
  round: number;
  mask: Uint8Array;
  dice: number | null;
}

export class ScribbleSession {
  sessionId: string | null = null;
  width = 0;
  height = 0;
  round = 0;
  overlayOpacity = 0.45;
  activeLabel: Label = 1;
  brushRadius = 0;

  private displayedMask: Uint8Array | null = null;
  /** Strokes not yet sent to the server. */
  private pending: Stroke[] = [];
  private redoStack: Stroke[] = [];
  /** Flushed scribbles, pixel -> label, as acknowledged by the server. */
  private committed = new Map<number, Label>();
  private rounds: RoundRecord[] = [];

  start(sessionId: string, height: number, width: number, mask: Uint8Array): void {
    this.sessionId = sessionId;
    this.height = height;
    this.width = width;
    this.round = 0;
    this.pending = [];
    this.redoStack = [];
    this.committed.clear();
    this.rounds = [];
    this.applyServerMask(mask, 0, null);
  }

  /** Replace the displayed mask with a server response; the only mutation path. */
  applyServerMask(mask: Uint8Array, round: number, dice: number | null): void {
    if (mask.length !== this.height * this.width) {
      throw new Error(`mask has ${mask.length} pixels, expected ${this.height * this.width}`);
    }
    this.displayedMask = mask;
    this.round = round;
    this.rounds.push({ round, mask, dice });
  }

  get mask(): Uint8Array | null {
    return this.displayedMask;
  }

  roundHistory(): RoundRecord[] {
    return this.rounds.slice();
  }

  addStroke(stroke: Stroke): void {
    if (stroke.pixels.length === 0) return;
    this.pending.push(stroke);
    this.redoStack = [];
  }

  undo(): boolean {
    const s = this.pending.pop();
    if (!s) return false;
    this.redoStack.push(s);
    return true;
  }

  redo(): boolean {
    const s = this.redoStack.pop();
    if (!s) return false;
    this.pending.push(s);
    return true;
  }

  hasPending(): boolean {
    return this.pending.length > 0;
  }

  /**
   * The scribble layer is a pure replay of the stroke log: committed
   * scribbles first, then pending strokes in order (later strokes win).
   */
  scribbleLayer(): Map<number, Label> {
    const layer = new Map(this.committed);
    for (const stroke of this.pending) {
      for (const p of stroke.pixels) {
        layer.set(p.y * this.width + p.x, stroke.label);
      }
    }
    return layer;
  }

  /** Wire items for the pending strokes, deduplicated with later labels winning. */
  pendingItems(): ScribbleItem[] {
    const latest = new Map<number, Label>();
    for (const stroke of this.pending) {
      for (const p of stroke.pixels) {
        latest.set(p.y * this.width + p.x, stroke.label);
      }
    }
    return Array.from(latest.entries()).map(([key, label]) => ({
      pixel: [Math.floor(key / this.width), key % this.width] as [number, number],
      label,
    }));
  }

  /** Mark pending strokes as delivered; they join the committed layer. */
  markFlushed(): void {
    for (const [key, label] of this.pendingItems().map(
      (it) => [it.pixel[0] * this.width + it.pixel[1], it.label] as [number, Label],
    )) {
      this.committed.set(key, label);
    }
    this.pending = [];
    this.redoStack = [];
  }
}
