/**
 * The four review panes: fixed, moving, warped, and the fixed-minus-warped
 * difference. Anatomy panes share one grayscale window ([-1000, 500] HU by
 * default); the difference pane has its own ([-500, 500] HU), which puts a
 * zero difference at mid-gray.
 */

import type { VolumeKind } from "./api.js";

export interface GrayWindow {
  lo: number;
  hi: number;
}

export const ANATOMY_WINDOW: GrayWindow = { lo: -1000, hi: 500 };
export const DIFF_WINDOW: GrayWindow = { lo: -500, hi: 500 };

export const PANE_ORDER: VolumeKind[] = ["fixed", "moving", "warped", "diff"];

export const PANE_LABELS: Record<VolumeKind, string> = {
  fixed: "fixed",
  moving: "moving",
  warped: "warped",
  diff: "fixed − warped",
};

export function defaultWindow(pane: VolumeKind): GrayWindow {
  return pane === "diff" ? { ...DIFF_WINDOW } : { ...ANATOMY_WINDOW };
}

export function validWindow(w: GrayWindow): boolean {
  return Number.isFinite(w.lo) && Number.isFinite(w.hi) && w.lo < w.hi;
}
