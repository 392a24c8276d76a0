// Workspace store: pending clicks for the image on the easel plus pure
// helpers for coordinate mapping and payload construction. Everything here
// is reconstructible from the server, so a page refresh is always safe.

import type { AnnotationPayload, CandidateBody } from "./api";

export interface WorkspaceState {
  candidate: CandidateBody | null;
  positivePoints: [number, number][]; // display coordinates
  negativeRegions: Set<number>;
  cleared: boolean;
  displaySize: [number, number];
  overlayOpacity: number;
}

export function emptyWorkspace(displaySize: [number, number] = [256, 256]): WorkspaceState {
  return {
    candidate: null,
    positivePoints: [],
    negativeRegions: new Set(),
    cleared: false,
    displaySize,
    overlayOpacity: 0.5,
  };
}

export function loadCandidate(state: WorkspaceState, candidate: CandidateBody): void {
  state.candidate = candidate;
  state.positivePoints = [];
  state.negativeRegions = new Set();
  state.cleared = false;
}

/** Proportional display->grid mapping with floor rounding, clamped to the grid. */
export function displayToGrid(
  point: [number, number],
  displaySize: [number, number],
  gridW: number,
  gridH: number,
): [number, number] {
  const gx = Math.floor((point[0] / displaySize[0]) * gridW);
  const gy = Math.floor((point[1] / displaySize[1]) * gridH);
  return [Math.min(Math.max(gx, 0), gridW - 1), Math.min(Math.max(gy, 0), gridH - 1)];
}

function inBounds(point: [number, number], size: [number, number]): boolean {
  return point[0] >= 0 && point[1] >= 0 && point[0] < size[0] && point[1] < size[1];
}

/** Left click: append a positive point marker. Out-of-bounds clicks are ignored. */
export function addPositivePoint(state: WorkspaceState, point: [number, number]): void {
  if (!state.candidate || !inBounds(point, state.displaySize)) return;
  state.positivePoints.push(point);
  state.cleared = false;
}

/** Right click: toggle the superpixel region under the cursor. */
export function toggleNegativeRegion(state: WorkspaceState, point: [number, number]): void {
  if (!state.candidate || !inBounds(point, state.displaySize)) return;
  const region = regionAt(state, point);
  if (state.negativeRegions.has(region)) {
    state.negativeRegions.delete(region);
  } else {
    state.negativeRegions.add(region);
  }
  state.cleared = false;
}

/** Middle click / Clear button: drop all marks and flag the image as cleared. */
export function clearMarks(state: WorkspaceState): void {
  state.positivePoints = [];
  state.negativeRegions = new Set();
  state.cleared = true;
}

/** Hit-test a display point against the raw labeling grid. */
export function regionAt(state: WorkspaceState, point: [number, number]): number {
  const regions = state.candidate!.regions;
  const [gx, gy] = displayToGrid(point, state.displaySize, regions[0].length, regions.length);
  return regions[gy][gx];
}

/** Build the payload POSTed on CONFIRM; schema shared with the Python side. */
export function buildPayload(state: WorkspaceState, now: number): AnnotationPayload {
  if (!state.candidate) throw new Error("no candidate loaded");
  if (state.cleared) {
    return {
      image_id: state.candidate.image_id,
      positive_points: [],
      negative_regions: [],
      cleared: true,
      display_size: [...state.displaySize] as [number, number],
      timestamp: now,
    };
  }
  return {
    image_id: state.candidate.image_id,
    positive_points: state.positivePoints.map((p) => [p[0], p[1]] as [number, number]),
    negative_regions: [...state.negativeRegions].sort((a, b) => a - b),
    cleared: false,
    display_size: [...state.displaySize] as [number, number],
    timestamp: now,
  };
}

export function hasMarks(state: WorkspaceState): boolean {
  return state.cleared || state.positivePoints.length > 0 || state.negativeRegions.size > 0;
}
