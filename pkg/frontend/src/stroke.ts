/** Brush stroke rasterization: pointer paths to pixel sets. */

export interface Pixel {
  y: number;
  x: number;
}

function diskOffsets(radius: number): Pixel[] {
  const out: Pixel[] = [];
  const r = Math.ceil(radius);
  for (let dy = -r; dy <= r; dy++) {
    for (let dx = -r; dx <= r; dx++) {
      if (dy * dy + dx * dx <= radius * radius) out.push({ y: dy, x: dx });
    }
  }
  return out;
}

/**
 * Rasterize a pointer path into the set of covered pixels: consecutive path
 * points are joined by interpolated line segments and stamped with a disk of
 * the given radius. Out-of-bounds pixels are clipped; duplicates removed.
 */
export function rasterizeStroke(
  path: Pixel[],
  radius: number,
  height: number,
  width: number,
): Pixel[] {
  if (path.length === 0) return [];
  const stamp = diskOffsets(radius);
  const seen = new Set<number>();
  const out: Pixel[] = [];

  const visit = (y: number, x: number) => {
    for (const d of stamp) {
      const py = y + d.y;
      const px = x + d.x;
      if (py < 0 || py >= height || px < 0 || px >= width) continue;
      const key = py * width + px;
      if (!seen.has(key)) {
        seen.add(key);
        out.push({ y: py, x: px });
      }
    }
  };

  let prev = path[0];
  visit(Math.round(prev.y), Math.round(prev.x));
  for (const point of path.slice(1)) {
    const steps = Math.max(Math.abs(point.y - prev.y), Math.abs(point.x - prev.x), 1);
    for (let s = 1; s <= steps; s++) {
      const t = s / steps;
      visit(
        Math.round(prev.y + t * (point.y - prev.y)),
        Math.round(prev.x + t * (point.x - prev.x)),
      );
    }
    prev = point;
  }
  return out;
}
