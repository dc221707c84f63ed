/**
 * Loss-dynamics chart: a pure model builder (testable in Node) plus a
 * canvas renderer. One point per optimization iteration — a 100 + 400 run
 * yields exactly 500 points — with a vertical marker at every phase change
 * (the full-image -> box-refinement handoff).
 */

import type { TraceRow } from "./api.js";

export interface ChartPoint {
  iteration: number;
  value: number;
}

export interface PhaseMarker {
  /** Last iteration of the finishing phase. */
  iteration: number;
  from: string;
  to: string;
}

export interface ChartModel {
  fullLoss: ChartPoint[];
  roiLoss: ChartPoint[];
  markers: PhaseMarker[];
  maxIteration: number;
  maxValue: number;
}

export function buildChartModel(rows: readonly TraceRow[]): ChartModel {
  const fullLoss: ChartPoint[] = [];
  const roiLoss: ChartPoint[] = [];
  const markers: PhaseMarker[] = [];
  let maxValue = 0;
  let prev: TraceRow | undefined;
  for (const row of rows) {
    if (row.iteration < 1) continue; // the pre-run baseline row is not a point
    fullLoss.push({ iteration: row.iteration, value: row.full_loss });
    maxValue = Math.max(maxValue, row.full_loss);
    if (row.roi_loss !== null && row.roi_loss !== undefined) {
      roiLoss.push({ iteration: row.iteration, value: row.roi_loss });
      maxValue = Math.max(maxValue, row.roi_loss);
    }
    if (prev && prev.phase !== row.phase) {
      markers.push({ iteration: prev.iteration, from: prev.phase, to: row.phase });
    }
    prev = row;
  }
  const lastPoint = fullLoss[fullLoss.length - 1];
  return {
    fullLoss,
    roiLoss,
    markers,
    maxIteration: lastPoint ? lastPoint.iteration : 0,
    maxValue,
  };
}

const MARGIN = { left: 46, right: 10, top: 10, bottom: 22 };
const FULL_COLOR = "#4477cc";
const ROI_COLOR = "#cc5544";
const MARKER_COLOR = "#888888";

function polyline(
  ctx: CanvasRenderingContext2D,
  points: ChartPoint[],
  toX: (it: number) => number,
  toY: (v: number) => number,
  color: string,
): void {
  if (points.length === 0) return;
  ctx.strokeStyle = color;
  ctx.lineWidth = 1.5;
  ctx.beginPath();
  points.forEach((p, i) => {
    const x = toX(p.iteration);
    const y = toY(p.value);
    if (i === 0) ctx.moveTo(x, y);
    else ctx.lineTo(x, y);
  });
  ctx.stroke();
}

/** Draw the model onto a canvas. An empty model yields an empty chart. */
export function renderChart(canvas: HTMLCanvasElement, model: ChartModel): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const w = canvas.width;
  const h = canvas.height;
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#cccccc";
  ctx.strokeRect(MARGIN.left, MARGIN.top, w - MARGIN.left - MARGIN.right, h - MARGIN.top - MARGIN.bottom);
  if (model.fullLoss.length === 0) return;

  const spanX = Math.max(model.maxIteration, 1);
  const spanY = model.maxValue > 0 ? model.maxValue : 1;
  const plotW = w - MARGIN.left - MARGIN.right;
  const plotH = h - MARGIN.top - MARGIN.bottom;
  const toX = (it: number): number => MARGIN.left + (it / spanX) * plotW;
  const toY = (v: number): number => MARGIN.top + plotH - (v / spanY) * plotH;

  for (const m of model.markers) {
    const x = toX(m.iteration);
    ctx.strokeStyle = MARKER_COLOR;
    ctx.setLineDash([4, 3]);
    ctx.beginPath();
    ctx.moveTo(x, MARGIN.top);
    ctx.lineTo(x, MARGIN.top + plotH);
    ctx.stroke();
    ctx.setLineDash([]);
    ctx.fillStyle = MARKER_COLOR;
    ctx.font = "10px sans-serif";
    ctx.fillText(`${m.from}→${m.to} @${m.iteration}`, x + 3, MARGIN.top + 10);
  }

  polyline(ctx, model.fullLoss, toX, toY, FULL_COLOR);
  polyline(ctx, model.roiLoss, toX, toY, ROI_COLOR);

  ctx.fillStyle = "#555555";
  ctx.font = "10px sans-serif";
  ctx.fillText("0", MARGIN.left - 4, h - MARGIN.bottom + 12);
  ctx.fillText(String(model.maxIteration), w - MARGIN.right - 20, h - MARGIN.bottom + 12);
  ctx.fillText(model.maxValue.toExponential(2), 2, MARGIN.top + 8);
  ctx.fillStyle = FULL_COLOR;
  ctx.fillText("full", MARGIN.left + 4, h - 2);
  ctx.fillStyle = ROI_COLOR;
  ctx.fillText("box", MARGIN.left + 34, h - 2);
}
