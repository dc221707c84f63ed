"""Optimization engine: Adam on the displacement field, full-image and
region-masked refinement runs, the accept/refine workflow state machine,
initializers, and loss-trace recording.

The optimized parameters are the displacement components themselves. Each
refinement phase runs Adam with a constant learning rate and fresh moment
estimates; starting moments at zero is what guarantees that a region-masked
run leaves every displacement vector outside the region bitwise untouched
(a zero gradient with zero momentum is an exact no-op).

Iteration numbering is global and strictly increasing across a session's
lifetime: the trace is seeded with an iteration-0 row at init, the first
optimization step is iteration 1, and later runs continue from wherever the
previous run stopped. Each trace row stores the loss measured at the field
*after* that iteration's update, so a row can always be checked against the
corresponding field snapshot.
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable

import numpy as np

from .volume import Volume3
from .transform import DisplacementField, RoiBox, warp, _sample_with_grad
from .loss import (LossConfig, GradientShareReport, RegionPartition,
                   image_loss, loss_grad_dvf, gradient_share)


class NumericError(RuntimeError):
    """A non-finite gradient or loss aborted an optimization run."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class StageError(RuntimeError):
    """The requested operation is not allowed in the session's current stage."""


# --------------------------------------------------------------- optimizer

@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")

    def to_json_dict(self) -> dict:
        return {"learning_rate": self.learning_rate, "beta1": self.beta1,
                "beta2": self.beta2, "epsilon": self.epsilon}

    @classmethod
    def from_json_dict(cls, d: dict) -> "OptimizerConfig":
        return cls(**d)


@dataclass
class OptimizerState:
    """Adam moment estimates. Kept in float64 regardless of parameter dtype."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape) -> "OptimizerState":
        return cls(m=np.zeros(shape, dtype=np.float64),
                   v=np.zeros(shape, dtype=np.float64), t=0)


def adam_step(params: np.ndarray, grad: np.ndarray, state: OptimizerState,
              cfg: OptimizerConfig) -> tuple[np.ndarray, OptimizerState]:
    """One Adam update with bias correction. Pure: returns new arrays.

    The update is computed in float64 and cast back to the parameter dtype,
    so a zero gradient (with zero moments) reproduces the parameters
    bit for bit.
    """
    if params.shape != grad.shape:
        raise ValueError(f"shape mismatch: params {params.shape} vs grad {grad.shape}")
    g = np.asarray(grad, dtype=np.float64)
    t = state.t + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * (g * g)
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    new_params = params.astype(np.float64) - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    return new_params.astype(params.dtype), OptimizerState(m=m, v=v, t=t)


# ------------------------------------------------------------------ trace

PHASE_INIT = "INIT"
PHASE_ISO = "ISO"
PHASE_RSO = "RSO"


@dataclass(frozen=True)
class TraceEntry:
    iteration: int
    phase: str
    full_loss: float
    roi_loss: float | None = None
    roi_id: int | None = None
    wall_ms: int = 0

    def to_json_dict(self) -> dict:
        return {"iteration": self.iteration, "phase": self.phase,
                "full_loss": self.full_loss, "roi_loss": self.roi_loss,
                "roi_id": self.roi_id, "wall_ms": self.wall_ms}


class LossTrace:
    """Append-only per-iteration loss record with strictly increasing indices."""

    def __init__(self):
        self.entries: list[TraceEntry] = []

    def append(self, entry: TraceEntry) -> None:
        if self.entries and entry.iteration <= self.entries[-1].iteration:
            raise ValueError(f"trace iterations must strictly increase: "
                             f"{entry.iteration} after {self.entries[-1].iteration}")
        self.entries.append(entry)

    @property
    def last_iteration(self) -> int:
        return self.entries[-1].iteration if self.entries else -1

    def rows_since(self, iteration: int) -> list[TraceEntry]:
        """Entries with index strictly greater than ``iteration``.

        The list is append-only, so a snapshot of its length taken here is a
        consistent prefix even while a run is appending.
        """
        n = len(self.entries)
        return [e for e in self.entries[:n] if e.iteration > iteration]

    def __len__(self) -> int:
        return len(self.entries)


def trace_to_csv(trace: LossTrace, include_wall_ms: bool = True) -> str:
    """CSV of the optimization rows (iteration >= 1; the seed row is a
    pre-run measurement, not an optimization step).

    ``include_wall_ms=False`` drops the timing column, which is the only
    nondeterministic field, so the file is reproducible run-to-run.
    """
    cols = ["iteration", "phase", "full_loss", "roi_loss", "roi_id"]
    if include_wall_ms:
        cols.append("wall_ms")
    lines = [",".join(cols)]
    for e in trace.entries:
        if e.iteration < 1:
            continue
        row = [str(e.iteration), e.phase, repr(e.full_loss),
               "" if e.roi_loss is None else repr(e.roi_loss),
               "" if e.roi_id is None else str(e.roi_id)]
        if include_wall_ms:
            row.append(str(e.wall_ms))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def trace_to_json(trace: LossTrace) -> str:
    return json.dumps({"entries": [e.to_json_dict() for e in trace.entries]}, indent=2)


def trace_from_json(text: str) -> LossTrace:
    trace = LossTrace()
    for d in json.loads(text)["entries"]:
        trace.append(TraceEntry(iteration=int(d["iteration"]), phase=str(d["phase"]),
                                full_loss=float(d["full_loss"]),
                                roi_loss=None if d.get("roi_loss") is None else float(d["roi_loss"]),
                                roi_id=None if d.get("roi_id") is None else int(d["roi_id"]),
                                wall_ms=int(d.get("wall_ms", 0))))
    return trace


def export_trace(session: "Session", fmt: str = "csv", include_wall_ms: bool = True) -> str:
    """Render the session's trace as ``csv`` (optimization rows) or ``json``
    (every row, round-trippable through ``trace_from_json``)."""
    if fmt == "csv":
        return trace_to_csv(session.loss_trace, include_wall_ms=include_wall_ms)
    if fmt == "json":
        return trace_to_json(session.loss_trace)
    raise ValueError(f"unknown trace format {fmt!r}")


# ---------------------------------------------------------------- session

class Stage(str, Enum):
    INITIALIZED = "initialized"
    ISO_RUNNING = "iso_running"
    ISO_DONE = "iso_done"
    RSO_RUNNING = "rso_running"
    RSO_DONE = "rso_done"
    ACCEPTED = "accepted"


@dataclass(frozen=True)
class RunSummary:
    phase: str
    iterations_requested: int
    iterations_completed: int
    start_iteration: int
    end_iteration: int
    cancelled: bool = False
    early_stopped: bool = False
    duration_ms: int = 0


@dataclass
class Session:
    """All state for one registration case.

    ``dvf`` is replaced wholesale (never mutated) after each iteration, so a
    concurrent reader always sees a field from a whole number of completed
    iterations. ``loss_trace`` is append-only. One optimization run at a
    time per session; readers may poll freely.
    """

    fixed: Volume3
    moving: Volume3
    dvf: DisplacementField
    loss_config: LossConfig
    optimizer_config: OptimizerConfig
    stage: Stage = Stage.INITIALIZED
    loss_trace: LossTrace = field(default_factory=LossTrace)
    roi_history: list[RoiBox] = field(default_factory=list)
    monitor_roi: RoiBox | None = None
    cancel_requested: bool = False
    last_run: RunSummary | None = None
    init_label: str = "identity"

    def request_cancel(self) -> None:
        self.cancel_requested = True

    def clone(self) -> "Session":
        """Independent copy sharing only the immutable volumes."""
        twin = Session(fixed=self.fixed, moving=self.moving, dvf=self.dvf,
                       loss_config=self.loss_config,
                       optimizer_config=self.optimizer_config,
                       stage=self.stage, monitor_roi=self.monitor_roi,
                       cancel_requested=False, last_run=self.last_run,
                       init_label=self.init_label)
        twin.loss_trace = LossTrace()
        twin.loss_trace.entries = list(self.loss_trace.entries)
        twin.roi_history = list(self.roi_history)
        return twin


# ------------------------------------------------------------ initializers

@dataclass(frozen=True)
class IdentityInit:
    """Start from zero displacement everywhere."""

    def build(self, fixed: Volume3, moving: Volume3, cfg: LossConfig) -> DisplacementField:
        return DisplacementField.zeros(fixed.dims)

    label = "identity"


@dataclass(frozen=True)
class CoarseToFineInit:
    """Multi-resolution pre-alignment standing in for a pretrained predictor.

    Optimizes a displacement field at each of ``levels`` resolutions from
    coarsest (downsampled by 2**(levels-1)) to full resolution, upsampling
    the field trilinearly between levels with displacement magnitudes scaled
    to the finer grid. Produces a fast rough alignment for the full image;
    fine structure is left to the subsequent refinement runs.
    """

    levels: int = 3
    iterations_per_level: int = 50
    learning_rate: float = 0.02

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.iterations_per_level < 0:
            raise ValueError("iterations_per_level must be >= 0")

    @property
    def label(self) -> str:
        return f"coarse_to_fine:{self.levels}"

    def build(self, fixed: Volume3, moving: Volume3, cfg: LossConfig) -> DisplacementField:
        dims = fixed.dims
        d_data = None
        prev_dims = None
        for level in range(self.levels - 1, -1, -1):
            f = 2 ** level
            level_dims = tuple(max(2, -(-n // f)) for n in dims)
            if f == 1:
                level_dims = dims
            fixed_l = _resample_volume(fixed, level_dims)
            moving_l = _resample_volume(moving, level_dims)
            if d_data is None:
                d_data = DisplacementField.zeros(level_dims).data.copy()
            else:
                d_data = _resample_field(d_data, prev_dims, level_dims)
            dvf_l = DisplacementField(level_dims, d_data)
            opt = OptimizerConfig(learning_rate=self.learning_rate)
            state = OptimizerState.zeros(dvf_l.data.shape)
            for _ in range(self.iterations_per_level):
                g = loss_grad_dvf(fixed_l, moving_l, dvf_l, cfg)
                if not np.all(np.isfinite(g)):
                    raise NumericError("non-finite gradient during coarse-to-fine init")
                new_data, state = adam_step(dvf_l.data, g, state, opt)
                dvf_l = DisplacementField(level_dims, new_data)
            d_data = dvf_l.data
            prev_dims = level_dims
        return DisplacementField(dims, d_data)


def _affine_disp(src_dims: tuple[int, int, int], dst_dims: tuple[int, int, int]) -> np.ndarray:
    """Displacement array that makes sampling on the dst grid read the src
    grid at proportionally mapped positions (corner-aligned)."""
    sx, sy, sz = src_dims
    dx, dy, dz = dst_dims
    scale = [(s - 1) / (d - 1) if d > 1 else 0.0 for s, d in zip((sx, sy, sz), (dx, dy, dz))]
    zz, yy, xx = np.meshgrid(np.arange(dz, dtype=np.float64),
                             np.arange(dy, dtype=np.float64),
                             np.arange(dx, dtype=np.float64), indexing="ij")
    disp = np.empty((dz, dy, dx, 3), dtype=np.float64)
    disp[..., 0] = xx * scale[0] - xx
    disp[..., 1] = yy * scale[1] - yy
    disp[..., 2] = zz * scale[2] - zz
    return disp


def _resample_volume(vol: Volume3, new_dims: tuple[int, int, int]) -> Volume3:
    if new_dims == vol.dims:
        return vol
    disp = _affine_disp(vol.dims, new_dims)
    values, _ = _sample_with_grad(vol.data, disp, want_grad=False)
    sx, sy, sz = vol.spacing_mm
    scale = [(n - 1) / (m - 1) if m > 1 else 1.0 for n, m in zip(vol.dims, new_dims)]
    return Volume3(new_dims, (sx * scale[0], sy * scale[1], sz * scale[2]),
                   vol.origin_mm, values.astype(np.float32))


def _resample_field(d_src: np.ndarray, src_dims: tuple[int, int, int],
                    dst_dims: tuple[int, int, int]) -> np.ndarray:
    """Resample per-component and rescale displacement magnitudes to the
    destination grid's voxel units."""
    disp = _affine_disp(src_dims, dst_dims)
    dz, dy, dx = dst_dims[2], dst_dims[1], dst_dims[0]
    out = np.empty((dz, dy, dx, 3), dtype=np.float32)
    for c in range(3):
        vals, _ = _sample_with_grad(np.ascontiguousarray(d_src[..., c]), disp, want_grad=False)
        mag = (dst_dims[c] - 1) / (src_dims[c] - 1) if src_dims[c] > 1 else 1.0
        out[..., c] = (vals * mag).astype(np.float32)
    return out


# ------------------------------------------------------------- operations

def init_session(fixed: Volume3, moving: Volume3, cfg: LossConfig,
                 init: IdentityInit | CoarseToFineInit | None = None,
                 optimizer: OptimizerConfig | None = None,
                 monitor_roi: RoiBox | None = None) -> Session:
    """Create a session, build the starting field, and seed the trace with
    the iteration-0 losses at that field."""
    if fixed.dims != moving.dims:
        raise ValueError(f"dims mismatch: fixed {fixed.dims} vs moving {moving.dims}")
    init = init or IdentityInit()
    optimizer = optimizer or OptimizerConfig()
    if monitor_roi is not None:
        monitor_roi.validate(fixed.dims)
    dvf = init.build(fixed, moving, cfg)
    session = Session(fixed=fixed, moving=moving, dvf=dvf, loss_config=cfg,
                      optimizer_config=optimizer, monitor_roi=monitor_roi,
                      init_label=init.label)
    warped = warp(moving, dvf)
    roi_loss = (image_loss(fixed, warped, cfg, monitor_roi)
                if monitor_roi is not None else None)
    session.loss_trace.append(TraceEntry(iteration=0, phase=PHASE_INIT,
                                         full_loss=image_loss(fixed, warped, cfg),
                                         roi_loss=roi_loss))
    return session


IterationCallback = Callable[["Session", TraceEntry], None]

_RUNNABLE_STAGES = (Stage.INITIALIZED, Stage.ISO_DONE, Stage.RSO_DONE)


def run_iso(session: Session, iterations: int = 100,
            callback: IterationCallback | None = None,
            early_stop_rel: float | None = None) -> Session:
    """Refine on the full-image loss for ``iterations`` Adam steps."""
    return _run_phase(session, PHASE_ISO, iterations, mask=None,
                      callback=callback, early_stop_rel=early_stop_rel)


def run_rso(session: Session, roi: RoiBox, iterations: int = 400,
            callback: IterationCallback | None = None,
            early_stop_rel: float | None = None) -> Session:
    """Refine on the loss restricted to ``roi`` for ``iterations`` steps.

    With ``reg_weight = 0`` the field outside the box is bitwise unchanged:
    the masked gradient is exactly zero there and the fresh Adam moments
    keep a zero gradient an exact no-op.
    """
    roi.validate(session.fixed.dims)
    return _run_phase(session, PHASE_RSO, iterations, mask=roi,
                      callback=callback, early_stop_rel=early_stop_rel)


def _run_phase(session: Session, phase: str, iterations: int, mask: RoiBox | None,
               callback: IterationCallback | None,
               early_stop_rel: float | None) -> Session:
    if iterations < 0:
        raise ValueError(f"iterations must be >= 0, got {iterations}")
    if session.stage == Stage.ACCEPTED:
        raise StageError("session is accepted and frozen; no further optimization")
    if session.stage not in _RUNNABLE_STAGES:
        raise StageError(f"cannot start a run while stage is {session.stage.value}")

    prior_stage = session.stage
    running, done = ((Stage.RSO_RUNNING, Stage.RSO_DONE) if phase == PHASE_RSO
                     else (Stage.ISO_RUNNING, Stage.ISO_DONE))
    roi_id = None
    if phase == PHASE_RSO:
        session.roi_history.append(mask)
        roi_id = len(session.roi_history) - 1

    session.stage = running
    session.cancel_requested = False
    state = OptimizerState.zeros(session.dvf.data.shape)
    start_iter = session.loss_trace.last_iteration
    completed = 0
    cancelled = False
    early_stopped = False
    t_start = time.perf_counter()
    window: list[float] = []

    try:
        for _ in range(iterations):
            if session.cancel_requested:
                session.cancel_requested = False
                cancelled = True
                break
            t0 = time.perf_counter()
            g = loss_grad_dvf(session.fixed, session.moving, session.dvf,
                              session.loss_config, mask)
            iteration = session.loss_trace.last_iteration + 1
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient at iteration {iteration}",
                                   iteration=iteration)
            new_data, state = adam_step(session.dvf.data, g, state,
                                        session.optimizer_config)
            session.dvf = DisplacementField(session.dvf.dims, new_data)

            warped = warp(session.moving, session.dvf)
            full_loss = image_loss(session.fixed, warped, session.loss_config)
            if not math.isfinite(full_loss):
                raise NumericError(f"non-finite loss at iteration {iteration}",
                                   iteration=iteration)
            roi_loss = None
            if mask is not None:
                roi_loss = image_loss(session.fixed, warped, session.loss_config, mask)
            elif session.monitor_roi is not None:
                roi_loss = image_loss(session.fixed, warped, session.loss_config,
                                      session.monitor_roi)
            entry = TraceEntry(iteration=iteration, phase=phase, full_loss=full_loss,
                               roi_loss=roi_loss, roi_id=roi_id,
                               wall_ms=int(round((time.perf_counter() - t0) * 1000)))
            session.loss_trace.append(entry)
            completed += 1
            if callback is not None:
                callback(session, entry)

            if early_stop_rel is not None:
                watched = roi_loss if mask is not None else full_loss
                window.append(watched)
                if len(window) > 10:
                    window.pop(0)
                    first, last = window[0], window[-1]
                    if first > 0 and (first - last) / first < early_stop_rel:
                        early_stopped = True
                        break
    except Exception:
        session.stage = prior_stage
        raise

    session.stage = done
    session.last_run = RunSummary(phase=phase, iterations_requested=iterations,
                                  iterations_completed=completed,
                                  start_iteration=start_iter + 1,
                                  end_iteration=session.loss_trace.last_iteration,
                                  cancelled=cancelled, early_stopped=early_stopped,
                                  duration_ms=int(round((time.perf_counter() - t_start) * 1000)))
    return session


# ---------------------------------------------------------------- workflow

VERDICT_ACCEPT = "accept"
VERDICT_IMAGE_NOT_ACCEPTABLE = "image_not_acceptable"
VERDICT_REGION_NOT_ACCEPTABLE = "region_not_acceptable"

_VERDICTS = (VERDICT_ACCEPT, VERDICT_IMAGE_NOT_ACCEPTABLE, VERDICT_REGION_NOT_ACCEPTABLE)


@dataclass(frozen=True)
class ScheduledAction:
    """What the reviewer's verdict schedules next: ``none`` (accepted),
    ``run_iso``, or ``run_rso`` with the box to refine."""

    kind: str
    roi: RoiBox | None = None


def workflow_decide(session: Session, verdict: str,
                    roi: RoiBox | None = None) -> ScheduledAction:
    """Route a reviewer verdict: accept freezes the session; an unacceptable
    image schedules a full-image run; an unacceptable region schedules a
    masked run on the reviewer's box. Mirrors the check-and-refine loop of
    the interactive workflow."""
    if verdict not in _VERDICTS:
        raise ValueError(f"unknown verdict {verdict!r}; expected one of {_VERDICTS}")
    if session.stage in (Stage.ISO_RUNNING, Stage.RSO_RUNNING):
        raise StageError("cannot apply a verdict while a run is in progress")
    if session.stage == Stage.ACCEPTED:
        if verdict == VERDICT_ACCEPT:
            return ScheduledAction(kind="none")
        raise StageError("session is accepted and frozen")
    if verdict == VERDICT_ACCEPT:
        session.stage = Stage.ACCEPTED
        return ScheduledAction(kind="none")
    if verdict == VERDICT_IMAGE_NOT_ACCEPTABLE:
        return ScheduledAction(kind="run_iso")
    if roi is None:
        raise ValueError("region_not_acceptable requires an roi")
    roi.validate(session.fixed.dims)
    return ScheduledAction(kind="run_rso", roi=roi)


def diagnose(session: Session, partition: RegionPartition) -> GradientShareReport:
    """Per-region loss and gradient shares at the session's current field.

    Runs with the regularizer weight forced to zero so regions separate
    exactly; tags the report with the current iteration index.
    """
    report = gradient_share(session.fixed, session.moving, session.dvf,
                            partition, session.loss_config.without_regularizer())
    return replace(report, iteration=max(session.loss_trace.last_iteration, 0))


# -------------------------------------------------------------- run config

@dataclass(frozen=True)
class RunConfig:
    """One registration run, as accepted from a JSON document:
    ``{loss: {...}, optimizer: {...}, iso_iters, rso_iters, seed}``."""

    loss: LossConfig = LossConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    iso_iters: int = 100
    rso_iters: int = 400
    seed: int = 0

    def to_json_dict(self) -> dict:
        return {"loss": {"kind": self.loss.kind, "reg_weight": self.loss.reg_weight,
                         "normalize_inputs": self.loss.normalize_inputs},
                "optimizer": self.optimizer.to_json_dict(),
                "iso_iters": self.iso_iters, "rso_iters": self.rso_iters,
                "seed": self.seed}

    @classmethod
    def from_json_dict(cls, d: dict) -> "RunConfig":
        loss = LossConfig(**d.get("loss", {}))
        optimizer = OptimizerConfig(**d.get("optimizer", {}))
        return cls(loss=loss, optimizer=optimizer,
                   iso_iters=int(d.get("iso_iters", 100)),
                   rso_iters=int(d.get("rso_iters", 400)),
                   seed=int(d.get("seed", 0)))
