/** Canvas 2D point renderer: screen-space square billboards, depth sorted. */

import { OrbitState, projectPoints } from "./camera.js";
import { RGB } from "./palette.js";

export interface RenderOptions {
  pointSize: number; // billboard edge in pixels at unit depth
  background: string;
}

export const DEFAULT_OPTIONS: RenderOptions = { pointSize: 6, background: "#10131a" };

export function drawPoints(
  ctx: CanvasRenderingContext2D,
  positions: number[][],
  colors: RGB[],
  orbit: OrbitState,
  options: RenderOptions = DEFAULT_OPTIONS,
): number {
  const { width, height } = ctx.canvas;
  ctx.fillStyle = options.background;
  ctx.fillRect(0, 0, width, height);
  const projected = projectPoints(positions, orbit, width, height);
  for (const p of projected) {
    const c = colors[p.index];
    const size = Math.max(1.5, options.pointSize / p.depth);
    ctx.fillStyle = `rgb(${Math.round(c[0] * 255)},${Math.round(c[1] * 255)},${Math.round(c[2] * 255)})`;
    ctx.fillRect(p.x - size / 2, p.y - size / 2, size, size);
  }
  return projected.length;
}
