import { describe, expect, it } from "vitest";

import {
  cameraBasis,
  defaultOrbit,
  normalizePositions,
  projectPoints,
  rotateOrbit,
  zoomOrbit,
} from "../src/camera.js";

describe("orbit camera", () => {
  it("clamps pitch and bounds zoom", () => {
    let s = defaultOrbit();
    for (let i = 0; i < 100; i++) s = rotateOrbit(s, 0, 0.5);
    expect(s.pitch).toBeLessThan(Math.PI / 2);
    let z = defaultOrbit();
    for (let i = 0; i < 100; i++) z = zoomOrbit(z, 0.5);
    expect(z.distance).toBeGreaterThanOrEqual(0.3);
  });

  it("basis is orthonormal and looks at the target", () => {
    const { right, down, fwd, eye } = cameraBasis(defaultOrbit());
    const dot = (a: number[], b: number[]) => a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    expect(Math.abs(dot(right, down))).toBeLessThan(1e-9);
    expect(Math.abs(dot(right, fwd))).toBeLessThan(1e-9);
    expect(dot(fwd, fwd)).toBeCloseTo(1, 9);
    // forward points from the eye toward the origin target
    const toTarget = [-eye[0], -eye[1], -eye[2]];
    const n = Math.hypot(...toTarget);
    expect(dot(fwd, toTarget.map((v) => v / n))).toBeCloseTo(1, 6);
  });

  it("projects the target to the canvas center", () => {
    const pts = projectPoints([[0, 0, 0]], defaultOrbit(), 200, 100);
    expect(pts).toHaveLength(1);
    expect(pts[0].x).toBeCloseTo(100, 4);
    expect(pts[0].y).toBeCloseTo(50, 4);
  });

  it("sorts far to near and culls points behind the camera", () => {
    const orbit = defaultOrbit();
    const { eye, fwd } = cameraBasis(orbit);
    const ahead1 = [eye[0] + fwd[0], eye[1] + fwd[1], eye[2] + fwd[2]];
    const ahead2 = [eye[0] + 2 * fwd[0], eye[1] + 2 * fwd[1], eye[2] + 2 * fwd[2]];
    const behind = [eye[0] - fwd[0], eye[1] - fwd[1], eye[2] - fwd[2]];
    const pts = projectPoints([ahead1, ahead2, behind], orbit, 100, 100);
    expect(pts.map((p) => p.index)).toEqual([1, 0]);
    expect(pts[0].depth).toBeGreaterThan(pts[1].depth);
  });

  it("normalizePositions centers and scales to unit extent", () => {
    const out = normalizePositions([
      [0, 0, 0],
      [2, 0, 0],
      [1, 1, 0],
    ]);
    const xs = out.map((p) => p[0]);
    expect(Math.min(...xs)).toBeCloseTo(-0.5, 9);
    expect(Math.max(...xs)).toBeCloseTo(0.5, 9);
    expect(normalizePositions([])).toEqual([]);
  });
});
