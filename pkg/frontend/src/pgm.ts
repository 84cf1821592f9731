/** Binary PGM (P5) encoding/decoding plus base64 helpers for the wire format. */

export interface Pgm {
  width: number;
  height: number;
  /** Row-major grayscale bytes, one byte per pixel. */
  data: Uint8Array;
}

export function decodePgm(bytes: Uint8Array): Pgm {
  if (bytes[0] !== 0x50 || bytes[1] !== 0x35) {
    throw new Error("not a binary PGM (P5) file");
  }
  const fields: number[] = [];
  let pos = 2;
  while (fields.length < 3) {
    while (pos < bytes.length && isSpace(bytes[pos])) pos++;
    if (bytes[pos] === 0x23) {
      // comment line
      while (pos < bytes.length && bytes[pos] !== 0x0a) pos++;
      continue;
    }
    let start = pos;
    while (pos < bytes.length && !isSpace(bytes[pos])) pos++;
    if (start === pos) throw new Error("truncated PGM header");
    fields.push(parseInt(asciiSlice(bytes, start, pos), 10));
  }
  pos++; // single whitespace after maxval
  const [width, height, maxval] = fields;
  if (!(width > 0 && height > 0) || !(maxval > 0 && maxval < 65536)) {
    throw new Error(`bad PGM header ${fields}`);
  }
  if (maxval > 255) throw new Error("16-bit PGM not supported in the viewer");
  const need = width * height;
  if (bytes.length - pos < need) {
    throw new Error(`PGM body has ${bytes.length - pos} bytes, expected ${need}`);
  }
  const data = bytes.slice(pos, pos + need);
  if (maxval !== 255) {
    for (let i = 0; i < data.length; i++) {
      data[i] = Math.round((data[i] / maxval) * 255);
    }
  }
  return { width, height, data };
}

export function encodePgm(img: Pgm): Uint8Array {
  const header = `P5\n${img.width} ${img.height}\n255\n`;
  const head = new TextEncoder().encode(header);
  const out = new Uint8Array(head.length + img.data.length);
  out.set(head, 0);
  out.set(img.data, head.length);
  return out;
}

/** Server masks are 0/255 PGM; normalize to a 0/1 byte mask. */
export function toBinaryMask(img: Pgm): Uint8Array {
  const out = new Uint8Array(img.data.length);
  for (let i = 0; i < img.data.length; i++) out[i] = img.data[i] > 127 ? 1 : 0;
  return out;
}

function isSpace(b: number): boolean {
  return b === 0x20 || b === 0x09 || b === 0x0a || b === 0x0d;
}

function asciiSlice(bytes: Uint8Array, a: number, b: number): string {
  let s = "";
  for (let i = a; i < b; i++) s += String.fromCharCode(bytes[i]);
  return s;
}

export function bytesToBase64(bytes: Uint8Array): string {
  if (typeof btoa === "function") {
    let bin = "";
    const block = 0x8000;
    for (let i = 0; i < bytes.length; i += block) {
      bin += String.fromCharCode(...bytes.subarray(i, i + block));
    }
    return btoa(bin);
  }
  return (globalThis as any).Buffer.from(bytes).toString("base64");
}

export function base64ToBytes(b64: string): Uint8Array {
  if (typeof atob === "function") {
    const bin = atob(b64);
    const out = new Uint8Array(bin.length);
    for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
    return out;
  }
  return new Uint8Array((globalThis as any).Buffer.from(b64, "base64"));
}
