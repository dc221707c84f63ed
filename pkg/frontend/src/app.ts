/**
 * Single-page wiring: upload a volume pair, review the four panes, draw a
 * box, run full-image / box-targeted refinement, watch the loss dynamics,
 * accept. All registration state lives server-side; this module only
 * reflects it.
 */

import { Client, ServiceError, type SessionHandle, type VolumeKind } from "./api.js";
import { buildChartModel, renderChart } from "./chart.js";
import { defaultWindow, PANE_LABELS, PANE_ORDER, validWindow, type GrayWindow } from "./panes.js";
import {
  paneExtent,
  projectBox,
  roiFromPicks,
  type Axis,
  type Dims,
  type PanePoint,
  type RoiBox,
} from "./roi.js";
import { TracePoller } from "./trace.js";

const POLL_MS = 300;
const PANE_REFRESH_MS = 1_000;

interface ViewState {
  sessionId: string | null;
  dims: Dims | null;
  axis: Axis;
  sliceIndex: number;
  zoom: number;
  anatomyWindow: GrayWindow;
  diffWindow: GrayWindow;
  pendingPicks: PanePoint[];
  pickSlice: number | null;
  slabExtent: number;
  roi: RoiBox | null;
  handle: SessionHandle | null;
  polling: boolean;
}

const state: ViewState = {
  sessionId: null,
  dims: null,
  axis: "z",
  sliceIndex: 0,
  zoom: 4,
  anatomyWindow: defaultWindow("fixed"),
  diffWindow: defaultWindow("diff"),
  pendingPicks: [],
  pickSlice: null,
  slabExtent: 5,
  roi: null,
  handle: null,
  polling: false,
};

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

const baseInput = el<HTMLInputElement>("base-url");
let client = new Client(baseInput.value);
baseInput.addEventListener("change", () => {
  client = new Client(baseInput.value);
});

const statusLine = el<HTMLElement>("status-line");
const errorLine = el<HTMLElement>("error-line");
const paneGrid = el<HTMLElement>("pane-grid");
const chartCanvas = el<HTMLCanvasElement>("loss-chart");
const roiReadout = el<HTMLElement>("roi-readout");
const metricsReadout = el<HTMLElement>("metrics-readout");

interface Pane {
  kind: VolumeKind;
  img: HTMLImageElement;
  overlay: HTMLCanvasElement;
  error: HTMLElement;
}

const panes: Pane[] = PANE_ORDER.map((kind) => {
  const cell = document.createElement("div");
  cell.className = "pane";
  const title = document.createElement("div");
  title.className = "pane-title";
  title.textContent = PANE_LABELS[kind];
  const holder = document.createElement("div");
  holder.className = "pane-holder";
  const img = document.createElement("img");
  img.alt = PANE_LABELS[kind];
  const overlay = document.createElement("canvas");
  const error = document.createElement("div");
  error.className = "pane-error";
  holder.append(img, overlay, error);
  cell.append(title, holder);
  paneGrid.append(cell);
  return { kind, img, overlay, error };
});

function showError(err: unknown): void {
  if (err instanceof ServiceError) {
    const where = err.field ? ` (field: ${err.field})` : "";
    errorLine.textContent = `${err.code}: ${err.message}${where}`;
  } else {
    errorLine.textContent = String(err);
  }
}

function clearError(): void {
  errorLine.textContent = "";
}

// ----------------------------------------------------------------- panes

let bustCounter = 0;

function paneWindow(kind: VolumeKind): GrayWindow {
  return kind === "diff" ? state.diffWindow : state.anatomyWindow;
}

function refreshPanes(bustLive: boolean): void {
  if (!state.sessionId || !state.dims) return;
  const { cols, rows } = paneExtent(state.dims, state.axis);
  if (bustLive) bustCounter++;
  for (const pane of panes) {
    const live = pane.kind === "warped" || pane.kind === "diff";
    pane.img.width = cols * state.zoom;
    pane.img.height = rows * state.zoom;
    pane.overlay.width = cols * state.zoom;
    pane.overlay.height = rows * state.zoom;
    pane.img.onerror = () => {
      pane.error.textContent = "slice unavailable";
    };
    pane.img.onload = () => {
      pane.error.textContent = "";
      drawOverlay(pane);
    };
    pane.img.src = client.sliceUrl(
      state.sessionId,
      pane.kind,
      state.axis,
      state.sliceIndex,
      paneWindow(pane.kind),
      live ? bustCounter : undefined,
    );
  }
}

function drawOverlay(pane: Pane): void {
  const ctx = pane.overlay.getContext("2d");
  if (!ctx) return;
  ctx.clearRect(0, 0, pane.overlay.width, pane.overlay.height);
  if (state.roi) {
    const rect = projectBox(state.roi, state.axis, state.sliceIndex, state.zoom);
    if (rect) {
      ctx.strokeStyle = "#e04040";
      ctx.lineWidth = 2;
      ctx.strokeRect(rect.left + 0.5, rect.top + 0.5, rect.width - 1, rect.height - 1);
    }
  }
  if (state.pickSlice === state.sliceIndex) {
    ctx.fillStyle = "#40c040";
    for (const p of state.pendingPicks) {
      const c = Math.floor(p.col / state.zoom) * state.zoom;
      const r = Math.floor(p.row / state.zoom) * state.zoom;
      ctx.fillRect(c, r, state.zoom, state.zoom);
    }
  }
}

function drawOverlays(): void {
  panes.forEach(drawOverlay);
}

// ------------------------------------------------------------------- ROI

function describeRoi(): void {
  if (state.roi) {
    roiReadout.textContent = `box [${state.roi.min.join(", ")}] .. [${state.roi.max.join(", ")}]`;
  } else if (state.pendingPicks.length === 1) {
    roiReadout.textContent = "pick the opposite corner";
  } else {
    roiReadout.textContent = "no box: click two corners on any pane";
  }
}

function handlePick(event: MouseEvent, pane: Pane): void {
  if (!state.dims) return;
  const rect = pane.overlay.getBoundingClientRect();
  const pick: PanePoint = {
    col: Math.floor(event.clientX - rect.left),
    row: Math.floor(event.clientY - rect.top),
  };
  if (state.pendingPicks.length !== 1 || state.pickSlice !== state.sliceIndex) {
    state.pendingPicks = [pick];
    state.pickSlice = state.sliceIndex;
    state.roi = null;
  } else {
    state.pendingPicks.push(pick);
    state.roi = roiFromPicks(
      state.pendingPicks[0]!,
      pick,
      state.axis,
      state.sliceIndex,
      state.slabExtent,
      state.dims,
      state.zoom,
    );
    state.pendingPicks = [];
    state.pickSlice = null;
  }
  describeRoi();
  drawOverlays();
  updateButtons();
}

// ------------------------------------------------------------ job control

const btnIso = el<HTMLButtonElement>("btn-iso");
const btnRso = el<HTMLButtonElement>("btn-rso");
const btnCancel = el<HTMLButtonElement>("btn-cancel");
const btnAccept = el<HTMLButtonElement>("btn-accept");
const isoIters = el<HTMLInputElement>("iso-iters");
const rsoIters = el<HTMLInputElement>("rso-iters");

function busy(): boolean {
  const s = state.handle?.status.state;
  return s === "running" || s === "cancelling";
}

function accepted(): boolean {
  return state.handle?.status.state === "accepted";
}

function updateButtons(): void {
  const ready = state.sessionId !== null;
  btnIso.disabled = !ready || busy() || accepted();
  btnRso.disabled = !ready || busy() || accepted() || state.roi === null;
  btnCancel.disabled = !ready || !busy();
  btnAccept.disabled = !ready || busy() || accepted();
}

function describeStatus(): void {
  const h = state.handle;
  if (!h) {
    statusLine.textContent = "no session";
    return;
  }
  const s = h.status;
  let text = `session ${h.id} · stage ${h.stage} · ${s.state}`;
  if (s.state === "running" && s.phase) text += ` (${s.phase} @ ${s.iteration})`;
  if (s.reason) text += ` · ${s.reason}`;
  statusLine.textContent = text;
}

async function refreshHandle(): Promise<void> {
  if (!state.sessionId) return;
  state.handle = await client.getSession(state.sessionId);
  describeStatus();
  updateButtons();
}

async function refreshMetrics(): Promise<void> {
  if (!state.sessionId) return;
  try {
    const m = await client.metrics(state.sessionId, state.roi ?? undefined);
    let text = `full RMSE ${m.full_rmse.toFixed(2)} ${m.units} @ iter ${m.at_iteration}`;
    if (m.roi_rmse !== undefined) text += ` · box RMSE ${m.roi_rmse.toFixed(2)} ${m.units}`;
    metricsReadout.textContent = text;
  } catch {
    metricsReadout.textContent = "";
  }
}

let poller: TracePoller | null = null;

function redrawChart(): void {
  if (poller) renderChart(chartCanvas, buildChartModel(poller.buffer.rows));
}

async function pollLoop(): Promise<void> {
  if (state.polling) return;
  state.polling = true;
  let lastPaneRefresh = 0;
  try {
    for (;;) {
      const step = poller ? await poller.step() : { appended: 0 };
      if (step.error) {
        statusLine.textContent = `trace polling failed, retrying in ${poller?.retryDelayMs} ms`;
      }
      if (step.appended > 0) redrawChart();
      await refreshHandle();
      const now = Date.now();
      if (busy() && now - lastPaneRefresh >= PANE_REFRESH_MS) {
        lastPaneRefresh = now;
        refreshPanes(true);
      }
      if (!busy()) break;
      await new Promise((r) => setTimeout(r, POLL_MS + (poller?.retryDelayMs ?? 0)));
    }
    if (poller) {
      await poller.step(); // drain rows finished between the last two polls
      redrawChart();
    }
    refreshPanes(true);
    await refreshMetrics();
  } finally {
    state.polling = false;
    updateButtons();
  }
}

async function startJob(kind: "iso" | "rso"): Promise<void> {
  if (!state.sessionId || busy()) return;
  clearError();
  try {
    if (kind === "iso") {
      await client.startIso(state.sessionId, Number(isoIters.value));
    } else {
      if (!state.roi) return;
      await client.startRso(state.sessionId, state.roi, Number(rsoIters.value));
    }
    await refreshHandle();
    void pollLoop();
  } catch (err) {
    showError(err);
  }
}

btnIso.addEventListener("click", () => void startJob("iso"));
btnRso.addEventListener("click", () => void startJob("rso"));

btnCancel.addEventListener("click", () => {
  if (!state.sessionId) return;
  clearError();
  client.cancel(state.sessionId).catch(showError);
});

btnAccept.addEventListener("click", async () => {
  if (!state.sessionId) return;
  clearError();
  try {
    await client.accept(state.sessionId);
    await refreshHandle();
  } catch (err) {
    showError(err);
  }
});

// ---------------------------------------------------------------- controls

const axisSelect = el<HTMLSelectElement>("axis-select");
const sliceSlider = el<HTMLInputElement>("slice-slider");
const sliceLabel = el<HTMLElement>("slice-label");
const zoomSelect = el<HTMLSelectElement>("zoom-select");
const slabInput = el<HTMLInputElement>("slab-extent");
const winInputs = {
  anatomyLo: el<HTMLInputElement>("win-anatomy-lo"),
  anatomyHi: el<HTMLInputElement>("win-anatomy-hi"),
  diffLo: el<HTMLInputElement>("win-diff-lo"),
  diffHi: el<HTMLInputElement>("win-diff-hi"),
};

function sliceExtent(): number {
  if (!state.dims) return 1;
  return state.axis === "x" ? state.dims.nx : state.axis === "y" ? state.dims.ny : state.dims.nz;
}

function applyAxisChange(): void {
  state.axis = axisSelect.value as Axis;
  const extent = sliceExtent();
  state.sliceIndex = Math.min(state.sliceIndex, extent - 1);
  sliceSlider.max = String(extent - 1);
  sliceSlider.value = String(state.sliceIndex);
  sliceLabel.textContent = `${state.sliceIndex} / ${extent - 1}`;
  refreshPanes(false);
}

axisSelect.addEventListener("change", applyAxisChange);

sliceSlider.addEventListener("input", () => {
  state.sliceIndex = Number(sliceSlider.value);
  sliceLabel.textContent = `${state.sliceIndex} / ${sliceExtent() - 1}`;
  refreshPanes(false);
});

zoomSelect.addEventListener("change", () => {
  state.zoom = Number(zoomSelect.value);
  refreshPanes(false);
});

slabInput.addEventListener("change", () => {
  state.slabExtent = Math.max(0, Math.floor(Number(slabInput.value) || 0));
  slabInput.value = String(state.slabExtent);
});

function applyWindows(): void {
  const anatomy = { lo: Number(winInputs.anatomyLo.value), hi: Number(winInputs.anatomyHi.value) };
  const diff = { lo: Number(winInputs.diffLo.value), hi: Number(winInputs.diffHi.value) };
  if (validWindow(anatomy)) state.anatomyWindow = anatomy;
  if (validWindow(diff)) state.diffWindow = diff;
  refreshPanes(false);
}

for (const input of Object.values(winInputs)) {
  input.addEventListener("change", applyWindows);
}

panes.forEach((pane) => {
  pane.overlay.addEventListener("click", (ev) => handlePick(ev, pane));
});

el<HTMLButtonElement>("btn-clear-roi").addEventListener("click", () => {
  state.roi = null;
  state.pendingPicks = [];
  state.pickSlice = null;
  describeRoi();
  drawOverlays();
  updateButtons();
});

// ------------------------------------------------------------------ upload

const uploadForm = el<HTMLFormElement>("upload-form");
uploadForm.addEventListener("submit", async (ev) => {
  ev.preventDefault();
  clearError();
  const fixedFile = el<HTMLInputElement>("fixed-file").files?.[0];
  const movingFile = el<HTMLInputElement>("moving-file").files?.[0];
  if (!fixedFile || !movingFile) {
    showError(new Error("choose both volumes first"));
    return;
  }
  try {
    const created = await client.createSession(fixedFile, movingFile);
    state.sessionId = created.id;
    state.dims = { nx: created.dims[0], ny: created.dims[1], nz: created.dims[2] };
    state.sliceIndex = Math.floor(sliceExtent() / 2);
    state.roi = null;
    state.pendingPicks = [];
    poller = new TracePoller((since) => client.trace(state.sessionId!, since));
    redrawChart();
    await refreshHandle();
    applyAxisChange();
    describeRoi();
    await refreshMetrics();
  } catch (err) {
    showError(err);
  }
});

describeRoi();
describeStatus();
updateButtons();
