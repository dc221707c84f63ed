/**
 * Typed client for the registration session service. Every mutation of
 * registration state goes through these endpoints; the UI holds no other
 * channel to the engine.
 */

import type { RoiBox } from "./roi.js";

export interface TraceRow {
  iteration: number;
  phase: string;
  full_loss: number;
  roi_loss: number | null;
  roi_id: number | null;
  wall_ms?: number | null;
}

export interface TracePage {
  rows: TraceRow[];
  last_iteration: number;
}

export type SessionState = "idle" | "running" | "cancelling" | "failed" | "accepted";

export interface SessionStatus {
  state: SessionState;
  phase: string | null;
  iteration: number;
  reason: string | null;
}

export interface RunSummary {
  phase: string;
  iterations_requested: number;
  iterations_completed: number;
  start_iteration: number;
  end_iteration: number;
  cancelled: boolean;
  early_stopped: boolean;
}

export interface SessionHandle {
  id: string;
  created_at: string;
  dims: [number, number, number];
  init: string;
  status: SessionStatus;
  stage: string;
  last_iteration: number;
  roi_history: RoiBox[];
  last_run: RunSummary | null;
  loss_config: { kind: string; reg_weight: number; normalize_inputs: boolean };
  optimizer_config: { learning_rate: number; beta1: number; beta2: number; epsilon: number };
}

export interface SessionCreated {
  id: string;
  created_at: string;
  dims: [number, number, number];
  init: string;
}

export interface Metrics {
  full_rmse: number;
  units: string;
  at_iteration: number;
  roi_rmse?: number;
  roi?: RoiBox;
}

export interface JobStarted {
  job: string;
  iterations: number;
  state: string;
  roi?: RoiBox;
}

export type VolumeKind = "fixed" | "moving" | "warped" | "diff";

/** Error body from the service; always `{code, message, field?}`. */
export class ServiceError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
    readonly field?: string,
  ) {
    super(message);
    this.name = "ServiceError";
  }
}

async function raiseFor(res: Response): Promise<never> {
  let code = "unknown";
  let message = `${res.status} ${res.statusText}`;
  let field: string | undefined;
  try {
    const body = (await res.json()) as { code?: string; message?: string; field?: string };
    if (body.code) code = body.code;
    if (body.message) message = body.message;
    field = body.field;
  } catch {
    // non-JSON error body; keep the status line
  }
  throw new ServiceError(res.status, code, message, field);
}

export class Client {
  constructor(readonly base: string) {}

  private url(path: string): string {
    return this.base.replace(/\/$/, "") + path;
  }

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await fetch(this.url(path), init);
    if (!res.ok) await raiseFor(res);
    return (await res.json()) as T;
  }

  private post<T>(path: string, payload?: unknown): Promise<T> {
    return this.json<T>(path, {
      method: "POST",
      headers: payload === undefined ? undefined : { "Content-Type": "application/json" },
      body: payload === undefined ? undefined : JSON.stringify(payload),
    });
  }

  health(): Promise<{ status: string }> {
    return this.json("/healthz");
  }

  listSessions(): Promise<{ sessions: { id: string; created_at: string; state: string; stage: string }[] }> {
    return this.json("/sessions");
  }

  /** Upload a fixed/moving pair (single-file .mha, payload inline). */
  async createSession(
    fixed: Blob,
    moving: Blob,
    config?: Record<string, unknown>,
  ): Promise<SessionCreated> {
    const form = new FormData();
    form.append("fixed", fixed, "fixed.mha");
    form.append("moving", moving, "moving.mha");
    if (config !== undefined) form.append("config", JSON.stringify(config));
    const res = await fetch(this.url("/sessions"), { method: "POST", body: form });
    if (!res.ok) await raiseFor(res);
    return (await res.json()) as SessionCreated;
  }

  getSession(id: string): Promise<SessionHandle> {
    return this.json(`/sessions/${id}`);
  }

  startIso(id: string, iterations?: number): Promise<JobStarted> {
    return this.post(`/sessions/${id}/iso`, iterations === undefined ? {} : { iterations });
  }

  startRso(id: string, roi: RoiBox, iterations?: number): Promise<JobStarted> {
    const payload: Record<string, unknown> = { roi };
    if (iterations !== undefined) payload.iterations = iterations;
    return this.post(`/sessions/${id}/rso`, payload);
  }

  /** Rows with iteration > since, in order; never gaps, never duplicates. */
  trace(id: string, since: number): Promise<TracePage> {
    return this.json(`/sessions/${id}/trace?since=${since}`);
  }

  cancel(id: string): Promise<{ state: string }> {
    return this.post(`/sessions/${id}/cancel`);
  }

  accept(id: string): Promise<{ state: string; stage: string }> {
    return this.post(`/sessions/${id}/accept`);
  }

  metrics(id: string, roi?: RoiBox): Promise<Metrics> {
    const query = roi ? `?roi=${[...roi.min, ...roi.max].join(",")}` : "";
    return this.json(`/sessions/${id}/metrics${query}`);
  }

  diagnose(id: string, blocks: [number, number, number]): Promise<Record<string, unknown>> {
    return this.json(`/sessions/${id}/diagnose?blocks=${blocks.join(",")}`);
  }

  /** URL for an <img> tag; `bust` forces a refetch of a live volume. */
  sliceUrl(
    id: string,
    volume: VolumeKind,
    axis: string,
    index: number,
    window?: { lo: number; hi: number },
    bust?: number,
  ): string {
    const params = new URLSearchParams({ volume, axis, index: String(index) });
    if (window) params.set("window", `${window.lo},${window.hi}`);
    if (bust !== undefined) params.set("t", String(bust));
    return this.url(`/sessions/${id}/slice?${params.toString()}`);
  }

  async fetchSlice(
    id: string,
    volume: VolumeKind,
    axis: string,
    index: number,
    window?: { lo: number; hi: number },
  ): Promise<ArrayBuffer> {
    const res = await fetch(this.sliceUrl(id, volume, axis, index, window));
    if (!res.ok) await raiseFor(res);
    return res.arrayBuffer();
  }
}
