/** Orbit camera and point projection for the canvas renderer. */

export interface OrbitState {
  yaw: number;
  pitch: number;
  distance: number;
  targetZ: number;
}

export interface Projected {
  x: number;
  y: number;
  depth: number;
  index: number;
}

export function defaultOrbit(): OrbitState {
  return { yaw: 0.6, pitch: 0.5, distance: 2.6, targetZ: 0 };
}

export function rotateOrbit(state: OrbitState, dYaw: number, dPitch: number): OrbitState {
  const limit = Math.PI / 2 - 0.01;
  return {
    ...state,
    yaw: state.yaw + dYaw,
    pitch: Math.max(-limit, Math.min(limit, state.pitch + dPitch)),
  };
}

export function zoomOrbit(state: OrbitState, factor: number): OrbitState {
  return { ...state, distance: Math.max(0.3, Math.min(20, state.distance * factor)) };
}

/** Camera basis from the orbit parameters; looks at (0, 0, targetZ). */
export function cameraBasis(state: OrbitState) {
  const cp = Math.cos(state.pitch);
  const eye = [
    state.distance * Math.cos(state.yaw) * cp,
    state.distance * Math.sin(state.yaw) * cp,
    state.targetZ + state.distance * Math.sin(state.pitch),
  ];
  const fwd = normalize([-eye[0], -eye[1], state.targetZ - eye[2]]);
  let up: number[] = [0, 0, 1];
  if (Math.abs(dot(fwd, up)) > 0.999) up = [1, 0, 0];
  const right = normalize(cross(fwd, up));
  const down = cross(fwd, right);
  return { eye, right, down, fwd };
}

function dot(a: number[], b: number[]): number {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

function cross(a: number[], b: number[]): number[] {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

function normalize(v: number[]): number[] {
  const n = Math.hypot(v[0], v[1], v[2]);
  return [v[0] / n, v[1] / n, v[2] / n];
}

/**
 * Perspective-project points into pixel coordinates, back-to-front sorted so
 * the renderer can paint them as overlapping billboards.
 */
export function projectPoints(
  positions: number[][],
  state: OrbitState,
  width: number,
  height: number,
  focal = 1.2,
): Projected[] {
  const { eye, right, down, fwd } = cameraBasis(state);
  const f = focal * Math.min(width, height);
  const cx = width / 2;
  const cy = height / 2;
  const out: Projected[] = [];
  for (let i = 0; i < positions.length; i++) {
    const p = positions[i];
    const rel = [p[0] - eye[0], p[1] - eye[1], p[2] - eye[2]];
    const z = dot(rel, fwd);
    if (z <= 0.05) continue;
    out.push({
      x: cx + (f * dot(rel, right)) / z,
      y: cy + (f * dot(rel, down)) / z,
      depth: z,
      index: i,
    });
  }
  out.sort((a, b) => b.depth - a.depth);
  return out;
}

/** Center positions and scale the longest bounding-box edge to one. */
export function normalizePositions(positions: number[][]): number[][] {
  if (positions.length === 0) return positions;
  const lo = [Infinity, Infinity, Infinity];
  const hi = [-Infinity, -Infinity, -Infinity];
  for (const p of positions) {
    for (let k = 0; k < 3; k++) {
      lo[k] = Math.min(lo[k], p[k]);
      hi[k] = Math.max(hi[k], p[k]);
    }
  }
  const extent = Math.max(hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]);
  const scale = extent > 0 ? 1 / extent : 1;
  return positions.map((p) => [
    (p[0] - (lo[0] + hi[0]) / 2) * scale,
    (p[1] - (lo[1] + hi[1]) / 2) * scale,
    (p[2] - (lo[2] + hi[2]) / 2) * scale,
  ]);
}
