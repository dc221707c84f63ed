import { describe, expect, it } from "vitest";

import type { TraceRow } from "../src/api.js";
import { buildChartModel } from "../src/chart.js";

function workflow(isoIters: number, rsoIters: number): TraceRow[] {
  const rows: TraceRow[] = [];
  for (let i = 1; i <= isoIters; i++) {
    rows.push({ iteration: i, phase: "ISO", full_loss: 1 / i, roi_loss: null, roi_id: null });
  }
  for (let i = isoIters + 1; i <= isoIters + rsoIters; i++) {
    rows.push({ iteration: i, phase: "RSO", full_loss: 1 / i, roi_loss: 0.5 / i, roi_id: 0 });
  }
  return rows;
}

describe("buildChartModel", () => {
  it("renders a 100+400 run as exactly 500 points with the marker at 100", () => {
    const model = buildChartModel(workflow(100, 400));
    expect(model.fullLoss.length).toBe(500);
    const its = model.fullLoss.map((p) => p.iteration);
    expect(new Set(its).size).toBe(500);
    expect(model.maxIteration).toBe(500);
    expect(model.markers).toEqual([{ iteration: 100, from: "ISO", to: "RSO" }]);
  });

  it("keeps the box-loss series to rows that carry one", () => {
    const model = buildChartModel(workflow(100, 400));
    expect(model.roiLoss.length).toBe(400);
    expect(model.roiLoss[0]?.iteration).toBe(101);
  });

  it("yields an empty model for an empty trace", () => {
    const model = buildChartModel([]);
    expect(model.fullLoss).toEqual([]);
    expect(model.roiLoss).toEqual([]);
    expect(model.markers).toEqual([]);
    expect(model.maxIteration).toBe(0);
  });

  it("ignores a pre-run baseline row", () => {
    const rows: TraceRow[] = [
      { iteration: 0, phase: "INIT", full_loss: 2, roi_loss: null, roi_id: null },
      ...workflow(3, 0),
    ];
    const model = buildChartModel(rows);
    expect(model.fullLoss.length).toBe(3);
    expect(model.markers).toEqual([]); // INIT->ISO is not a phase change between points
  });

  it("marks every later phase boundary as well", () => {
    const rows = workflow(10, 5);
    for (let i = 16; i <= 20; i++) {
      rows.push({ iteration: i, phase: "ISO", full_loss: 1 / i, roi_loss: null, roi_id: null });
    }
    const model = buildChartModel(rows);
    expect(model.markers).toEqual([
      { iteration: 10, from: "ISO", to: "RSO" },
      { iteration: 15, from: "RSO", to: "ISO" },
    ]);
  });
});
