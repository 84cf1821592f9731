/** Pure pixel composition for the viewer layers (no canvas dependency). */

import { Label } from "./state.js";

/** Foreground scribbles are red, background scribbles cyan. */
export const FG_COLOR: [number, number, number] = [255, 0, 0];
export const BG_COLOR: [number, number, number] = [0, 255, 255];
export const MASK_COLOR: [number, number, number] = [255, 220, 0];

export function composeOverlay(
  base: Uint8Array,
  mask: Uint8Array | null,
  scribbles: Map<number, Label>,
  width: number,
  height: number,
  maskOpacity: number,
): Uint8ClampedArray {
  const n = width * height;
  if (base.length !== n) throw new Error("base layer extents mismatch");
  if (mask && mask.length !== n) throw new Error("mask layer extents mismatch");
  const out = new Uint8ClampedArray(n * 4);
  for (let i = 0; i < n; i++) {
    let r = base[i];
    let g = base[i];
    let b = base[i];
    if (mask && mask[i] > 0) {
      r = r * (1 - maskOpacity) + MASK_COLOR[0] * maskOpacity;
      g = g * (1 - maskOpacity) + MASK_COLOR[1] * maskOpacity;
      b = b * (1 - maskOpacity) + MASK_COLOR[2] * maskOpacity;
    }
    const label = scribbles.get(i);
    if (label !== undefined) {
      [r, g, b] = label === 1 ? FG_COLOR : BG_COLOR;
    }
    const at = i * 4;
    out[at] = r;
    out[at + 1] = g;
    out[at + 2] = b;
    out[at + 3] = 255;
  }
  return out;
}

export function masksDiffer(a: Uint8Array, b: Uint8Array): boolean {
  if (a.length !== b.length) return true;
  for (let i = 0; i < a.length; i++) {
    if (a[i] !== b[i]) return true;
  }
  return false;
}
