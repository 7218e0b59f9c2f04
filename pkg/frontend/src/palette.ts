/**
 * Fixed coloring rules, mirrored from the CLI's PLY palette so screenshots
 * and exported clouds are comparable across the two front ends.
 */

export type RGB = [number, number, number];

export const ASSIGNMENT_PALETTE: RGB[] = [
  [0.894, 0.102, 0.11],
  [0.216, 0.494, 0.722],
  [0.302, 0.686, 0.29],
  [0.596, 0.306, 0.639],
  [1.0, 0.498, 0.0],
  [0.969, 0.506, 0.749],
  [0.651, 0.337, 0.157],
  [0.4, 0.761, 0.647],
  [0.988, 0.553, 0.384],
  [0.553, 0.627, 0.796],
  [0.906, 0.541, 0.765],
  [0.651, 0.847, 0.329],
  [1.0, 0.851, 0.184],
  [0.898, 0.769, 0.58],
  [0.702, 0.702, 0.702],
  [0.122, 0.471, 0.706],
];

export const NO_LABEL_COLOR: RGB = [0.5, 0.5, 0.5];

export function assignmentColor(assignment: number): RGB {
  if (assignment < 0) return NO_LABEL_COLOR;
  return ASSIGNMENT_PALETTE[assignment % ASSIGNMENT_PALETTE.length];
}

/** Display-only clipping: scores below 0 render as 0; assignments untouched. */
export function heatmapColor(score: number): RGB {
  const t = Math.max(0, Math.min(1, score));
  // dark blue -> yellow ramp
  return [t, 0.15 + 0.75 * t, 0.55 * (1 - t) + 0.1];
}

export function colorsForAssignment(assignment: number[]): RGB[] {
  return assignment.map(assignmentColor);
}

export function colorsForHeatmap(scores: number[][], queryIndex: number): RGB[] {
  return scores.map((row) => heatmapColor(row[queryIndex]));
}
