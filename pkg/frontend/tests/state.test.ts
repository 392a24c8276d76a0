import { describe, expect, it } from "vitest";

import type { CandidateBody } from "../src/api";
import {
  addPositivePoint,
  buildPayload,
  clearMarks,
  displayToGrid,
  emptyWorkspace,
  hasMarks,
  loadCandidate,
  regionAt,
  toggleNegativeRegion,
} from "../src/state";
import fixture from "./fixtures/annotation_payloads.json";

function candidate(grid = 16): CandidateBody {
  const regions: number[][] = [];
  for (let y = 0; y < grid; y++) {
    // left half region 0, right half region 1
    regions.push(Array.from({ length: grid }, (_, x) => (x < grid / 2 ? 0 : 1)));
  }
  return {
    image_id: "train_00001",
    annotated: false,
    attention: regions.map((row) => row.map(() => 0.5)),
    regions,
    region_count: 2,
    image_url: "/api/image/train_00001",
    attention_url: "/api/attention/train_00001",
  };
}

function freshWorkspace() {
  const ws = emptyWorkspace([256, 256]);
  loadCandidate(ws, candidate());
  return ws;
}

describe("displayToGrid", () => {
  it("maps proportionally with floor rounding", () => {
    expect(displayToGrid([128, 64], [256, 256], 16, 16)).toEqual([8, 4]);
  });

  it("clamps the bottom-right edge into the grid", () => {
    expect(displayToGrid([256, 256], [256, 256], 16, 16)).toEqual([15, 15]);
  });
});

describe("click handling", () => {
  it("left click appends a positive point", () => {
    const ws = freshWorkspace();
    addPositivePoint(ws, [128, 64]);
    expect(ws.positivePoints).toEqual([[128, 64]]);
  });

  it("ignores clicks outside the image", () => {
    const ws = freshWorkspace();
    addPositivePoint(ws, [300, 10]);
    addPositivePoint(ws, [-1, 10]);
    toggleNegativeRegion(ws, [10, 400]);
    expect(ws.positivePoints).toHaveLength(0);
    expect(ws.negativeRegions.size).toBe(0);
  });

  it("right click toggles the region under the cursor", () => {
    const ws = freshWorkspace();
    toggleNegativeRegion(ws, [200, 100]); // right half -> region 1
    expect([...ws.negativeRegions]).toEqual([1]);
    toggleNegativeRegion(ws, [200, 100]);
    expect(ws.negativeRegions.size).toBe(0);
  });

  it("middle click clears everything and flags the annotation", () => {
    const ws = freshWorkspace();
    addPositivePoint(ws, [10, 10]);
    toggleNegativeRegion(ws, [200, 100]);
    clearMarks(ws);
    expect(ws.positivePoints).toHaveLength(0);
    expect(ws.negativeRegions.size).toBe(0);
    expect(ws.cleared).toBe(true);
    expect(hasMarks(ws)).toBe(true); // cleared is itself a confirmable mark
  });

  it("hit-testing maps every display pixel to exactly one region", () => {
    const ws = freshWorkspace();
    for (const x of [0, 64, 127, 128, 255]) {
      for (const y of [0, 100, 255]) {
        const region = regionAt(ws, [x, y]);
        expect(region === 0 || region === 1).toBe(true);
        expect(region).toBe(x < 128 ? 0 : 1);
      }
    }
  });
});

describe("payload schema", () => {
  it("matches the shared fixture shape for a marked image", () => {
    const ws = freshWorkspace();
    addPositivePoint(ws, [128.0, 64.0]);
    addPositivePoint(ws, [30.5, 200.25]);
    toggleNegativeRegion(ws, [10, 10]); // region 0
    toggleNegativeRegion(ws, [200, 10]); // region 1 stands in for fixture's 3
    const payload = buildPayload(ws, 1700000000.0);
    const want = fixture.payloads[0];
    expect(Object.keys(payload).sort()).toEqual(Object.keys(want).sort());
    expect(payload.image_id).toBe(want.image_id);
    expect(payload.positive_points).toEqual(want.positive_points);
    expect(payload.cleared).toBe(false);
    expect(payload.display_size).toEqual(want.display_size);
    expect(payload.negative_regions).toEqual([0, 1]);
  });

  it("emits the cleared shape from the fixture after middle click", () => {
    const ws = freshWorkspace();
    ws.candidate!.image_id = "train_00002";
    addPositivePoint(ws, [10, 10]);
    clearMarks(ws);
    const payload = buildPayload(ws, 1700000001.5);
    expect(payload).toEqual(fixture.payloads[1]);
  });

  it("sorts negative regions deterministically", () => {
    const ws = freshWorkspace();
    toggleNegativeRegion(ws, [200, 10]); // 1 first
    toggleNegativeRegion(ws, [10, 10]); // then 0
    expect(buildPayload(ws, 0).negative_regions).toEqual([0, 1]);
  });
});
