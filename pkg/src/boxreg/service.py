"""HTTP/JSON session service for interactive review.

Exposes the registration workflow over the wire: volume upload, slice
rendering, full-image and box-targeted refinement jobs, ROI submission,
live loss traces, metrics, and gradient diagnostics.

Concurrency contract: one optimization job at a time per session (second
start returns 409), any number of concurrent readers. The engine publishes
the displacement field wholesale after each iteration and the trace is
append-only, so every read observes a whole-iteration snapshot without
locking. Cancellation is cooperative between iterations.

Error bodies are always ``{code, message, field?}``.
"""

from __future__ import annotations

import argparse
import io
import json
import os
import tempfile
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np
from fastapi import FastAPI, File, Form, Request, UploadFile
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, Response
from PIL import Image
from starlette.exceptions import HTTPException as StarletteHTTPException

from . import engine
from .engine import (CoarseToFineInit, IdentityInit, NumericError,
                     OptimizerConfig, Session, Stage, StageError, TraceEntry,
                     trace_from_json, trace_to_json)
from .loss import LossConfig, RegionPartition
from .transform import DisplacementField, RoiBox, load_dvf, warp
from .volume import (FormatError, PayloadSizeError, Volume3, extract_slice,
                     load_volume, rmse, window_level)
from .volume import _mhd_header_text  # shared MetaImage writer

DEFAULT_MAX_UPLOAD_BYTES = 256 * 1024 * 1024
ANATOMY_WINDOW = (-1000.0, 500.0)
DIFF_WINDOW = (-500.0, 500.0)


class ApiError(Exception):
    """Maps directly to an HTTP error response with the standard body."""

    def __init__(self, status: int, code: str, message: str, field: str | None = None):
        super().__init__(message)
        self.status = status
        self.code = code
        self.field = field

    def body(self) -> dict:
        d = {"code": self.code, "message": str(self)}
        if self.field is not None:
            d["field"] = self.field
        return d


# ------------------------------------------------------------- session state

@dataclass
class ManagedSession:
    """Engine session plus job bookkeeping for the HTTP layer."""

    id: str
    created_at: str
    session: Session
    lock: threading.Lock = field(default_factory=threading.Lock)
    thread: threading.Thread | None = None
    state: str = "idle"            # idle | running | cancelling | failed | accepted
    phase: str | None = None
    iteration: int = 0
    failure: str | None = None

    def status_dict(self) -> dict:
        return {"state": self.state, "phase": self.phase,
                "iteration": self.iteration, "reason": self.failure}

    def handle_dict(self) -> dict:
        s = self.session
        last_run = None
        if s.last_run is not None:
            r = s.last_run
            last_run = {"phase": r.phase,
                        "iterations_requested": r.iterations_requested,
                        "iterations_completed": r.iterations_completed,
                        "start_iteration": r.start_iteration,
                        "end_iteration": r.end_iteration,
                        "cancelled": r.cancelled,
                        "early_stopped": r.early_stopped}
        return {
            "id": self.id,
            "created_at": self.created_at,
            "dims": list(s.fixed.dims),
            "init": s.init_label,
            "status": self.status_dict(),
            "stage": s.stage.value,
            "last_iteration": s.loss_trace.last_iteration,
            "roi_history": [_roi_dict(r) for r in s.roi_history],
            "last_run": last_run,
            "loss_config": {"kind": s.loss_config.kind,
                            "reg_weight": s.loss_config.reg_weight,
                            "normalize_inputs": s.loss_config.normalize_inputs},
            "optimizer_config": s.optimizer_config.to_json_dict(),
        }


def _roi_dict(roi: RoiBox) -> dict:
    return {"min": list(roi.min_corner), "max": list(roi.max_corner)}


def _roi_from_dict(d: dict, field_name: str = "roi") -> RoiBox:
    try:
        mn = tuple(int(v) for v in d["min"])
        mx = tuple(int(v) for v in d["max"])
        if len(mn) != 3 or len(mx) != 3:
            raise ValueError("corners must have three components")
        return RoiBox(mn, mx)
    except (KeyError, TypeError, ValueError) as err:
        raise ApiError(422, "invalid_roi",
                       f"roi must be {{min: [x,y,z], max: [x,y,z]}}: {err}",
                       field=field_name)


class SessionManager:
    def __init__(self, store_path: str | None = None,
                 max_upload_bytes: int = DEFAULT_MAX_UPLOAD_BYTES):
        self.sessions: dict[str, ManagedSession] = {}
        self.registry_lock = threading.Lock()
        self.store_path = store_path
        self.max_upload_bytes = max_upload_bytes
        if store_path:
            os.makedirs(store_path, exist_ok=True)
            self._restore_all()

    # -- registry -----------------------------------------------------------

    def get(self, session_id: str) -> ManagedSession:
        ms = self.sessions.get(session_id)
        if ms is None:
            raise ApiError(404, "not_found", f"no session {session_id!r}")
        return ms

    def create(self, fixed: Volume3, moving: Volume3, cfg: dict) -> ManagedSession:
        init = _build_init(cfg)
        loss_cfg = _build_loss_config(cfg)
        opt_cfg = _build_optimizer_config(cfg)
        monitor_roi = None
        if cfg.get("monitor_roi") is not None:
            monitor_roi = _roi_from_dict(cfg["monitor_roi"], "monitor_roi")
            _validate_roi(monitor_roi, fixed.dims, "monitor_roi")
        try:
            session = engine.init_session(fixed, moving, loss_cfg, init=init,
                                          optimizer=opt_cfg, monitor_roi=monitor_roi)
        except NumericError as err:
            raise ApiError(422, "numeric_failure", f"initialization failed: {err}")
        ms = ManagedSession(id=uuid.uuid4().hex[:12],
                            created_at=_now_iso(), session=session)
        ms.iteration = session.loss_trace.last_iteration
        with self.registry_lock:
            self.sessions[ms.id] = ms
        if self.store_path:
            self._persist_volumes(ms)
            self._persist_state(ms)
        return ms

    # -- jobs ---------------------------------------------------------------

    def start_job(self, ms: ManagedSession, phase: str, runner) -> None:
        """Spawn the optimization thread; 409 if one is already active."""
        with ms.lock:
            if ms.state in ("running", "cancelling"):
                raise ApiError(409, "busy",
                               f"session {ms.id} already has a {ms.phase} job running")
            if ms.session.stage == Stage.ACCEPTED:
                raise ApiError(409, "frozen",
                               f"session {ms.id} is accepted and frozen")
            ms.state = "running"
            ms.phase = phase
            ms.failure = None

            def job():
                failure = None
                try:
                    runner()
                except (NumericError, StageError) as err:
                    failure = str(err)
                # Snapshot to disk before reporting idle so that anyone who
                # observes the idle state also sees the final on-disk state.
                if self.store_path:
                    self._persist_state(ms)
                with ms.lock:
                    ms.phase = None
                    if failure is not None:
                        ms.state = "failed"
                        ms.failure = failure
                    else:
                        ms.state = "idle"

            ms.thread = threading.Thread(target=job, daemon=True,
                                         name=f"boxreg-{ms.id}-{phase}")
            ms.thread.start()

    def cancel(self, ms: ManagedSession) -> dict:
        with ms.lock:
            if ms.state == "running":
                ms.session.request_cancel()
                ms.state = "cancelling"
                return {"state": "cancelling"}
            # Nothing to stop; never arm the engine flag while idle, or it
            # would silently truncate the next run.
            return {"state": ms.state}

    def accept(self, ms: ManagedSession) -> dict:
        with ms.lock:
            if ms.state in ("running", "cancelling"):
                raise ApiError(409, "busy",
                               f"cannot accept while a {ms.phase} job is running")
            try:
                engine.workflow_decide(ms.session, engine.VERDICT_ACCEPT)
            except StageError as err:
                raise ApiError(409, "invalid_stage", str(err))
            ms.state = "accepted"
        if self.store_path:
            self._persist_state(ms)
        return {"state": "accepted", "stage": ms.session.stage.value}

    # -- persistence ----------------------------------------------------------

    def _dir(self, session_id: str) -> str:
        return os.path.join(self.store_path, session_id)

    def _persist_volumes(self, ms: ManagedSession) -> None:
        d = self._dir(ms.id)
        os.makedirs(d, exist_ok=True)
        with open(os.path.join(d, "fixed.mha"), "wb") as f:
            f.write(_volume_bytes(ms.session.fixed))
        with open(os.path.join(d, "moving.mha"), "wb") as f:
            f.write(_volume_bytes(ms.session.moving))

    def _persist_state(self, ms: ManagedSession) -> None:
        d = self._dir(ms.id)
        os.makedirs(d, exist_ok=True)
        s = ms.session
        with open(os.path.join(d, "dvf.mha"), "wb") as f:
            f.write(_dvf_bytes(s.dvf))
        with open(os.path.join(d, "trace.json"), "w", encoding="ascii") as f:
            f.write(trace_to_json(s.loss_trace))
        state = {
            "id": ms.id,
            "created_at": ms.created_at,
            "stage": s.stage.value,
            "init": s.init_label,
            "accepted": ms.state == "accepted",
            "roi_history": [_roi_dict(r) for r in s.roi_history],
            "monitor_roi": _roi_dict(s.monitor_roi) if s.monitor_roi else None,
            "loss_config": {"kind": s.loss_config.kind,
                            "reg_weight": s.loss_config.reg_weight,
                            "normalize_inputs": s.loss_config.normalize_inputs},
            "optimizer_config": s.optimizer_config.to_json_dict(),
        }
        tmp = os.path.join(d, "state.json.tmp")
        with open(tmp, "w", encoding="ascii") as f:
            json.dump(state, f, indent=2)
        os.replace(tmp, os.path.join(d, "state.json"))

    def _restore_all(self) -> None:
        for name in sorted(os.listdir(self.store_path)):
            state_path = os.path.join(self._dir(name), "state.json")
            if not os.path.isfile(state_path):
                continue
            try:
                self.sessions[name] = self._restore_one(name, state_path)
            except (OSError, ValueError, KeyError, FormatError, PayloadSizeError):
                # An unreadable snapshot must not take the service down.
                continue

    def _restore_one(self, session_id: str, state_path: str) -> ManagedSession:
        d = self._dir(session_id)
        with open(state_path, "r", encoding="ascii") as f:
            state = json.load(f)
        fixed = load_volume(os.path.join(d, "fixed.mha"))
        moving = load_volume(os.path.join(d, "moving.mha"))
        dvf = load_dvf(os.path.join(d, "dvf.mha"))
        loss_cfg = LossConfig(**state["loss_config"])
        opt_cfg = OptimizerConfig.from_json_dict(state["optimizer_config"])
        monitor = (_roi_from_dict(state["monitor_roi"])
                   if state.get("monitor_roi") else None)
        session = Session(fixed=fixed, moving=moving, dvf=dvf,
                          loss_config=loss_cfg, optimizer_config=opt_cfg,
                          stage=Stage(state["stage"]), monitor_roi=monitor,
                          init_label=state.get("init", "identity"))
        with open(os.path.join(d, "trace.json"), "r", encoding="ascii") as f:
            session.loss_trace = trace_from_json(f.read())
        session.roi_history = [_roi_from_dict(r) for r in state.get("roi_history", [])]
        ms = ManagedSession(id=session_id, created_at=state["created_at"],
                            session=session)
        ms.state = "accepted" if state.get("accepted") else "idle"
        ms.iteration = session.loss_trace.last_iteration
        return ms


# ----------------------------------------------------------- config parsing

def _build_init(cfg: dict):
    spec = cfg.get("init", "identity")
    if spec == "identity":
        return IdentityInit()
    if spec == "coarse":
        return CoarseToFineInit()
    if isinstance(spec, dict) and spec.get("kind") == "coarse":
        try:
            return CoarseToFineInit(
                levels=int(spec.get("levels", 3)),
                iterations_per_level=int(spec.get("iterations_per_level", 50)),
                learning_rate=float(spec.get("learning_rate", 0.02)))
        except ValueError as err:
            raise ApiError(400, "invalid_config", str(err), field="init")
    raise ApiError(400, "invalid_config",
                   f"init must be 'identity', 'coarse', or a coarse spec, got {spec!r}",
                   field="init")


def _build_loss_config(cfg: dict) -> LossConfig:
    try:
        return LossConfig(**cfg.get("loss", {}))
    except (TypeError, ValueError) as err:
        raise ApiError(400, "invalid_config", str(err), field="loss")


def _build_optimizer_config(cfg: dict) -> OptimizerConfig:
    try:
        return OptimizerConfig(**cfg.get("optimizer", {}))
    except (TypeError, ValueError) as err:
        raise ApiError(400, "invalid_config", str(err), field="optimizer")


def _validate_roi(roi: RoiBox, dims: tuple[int, int, int], field_name: str) -> RoiBox:
    for axis, (lo, hi, n) in enumerate(zip(roi.min_corner, roi.max_corner, dims)):
        if lo < 0:
            raise ApiError(422, "invalid_roi",
                           f"min[{axis}] = {lo} is below 0",
                           field=f"{field_name}.min[{axis}]")
        if hi >= n:
            raise ApiError(422, "invalid_roi",
                           f"max[{axis}] = {hi} exceeds extent {n} along {'xyz'[axis]}",
                           field=f"{field_name}.max[{axis}]")
    return roi


# --------------------------------------------------------------- serializers

def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _volume_bytes(v: Volume3) -> bytes:
    header = _mhd_header_text(v.dims, v.spacing_mm, v.origin_mm, "MET_FLOAT", "LOCAL")
    return header.encode("ascii") + np.ascontiguousarray(v.data, dtype="<f4").tobytes()


def _dvf_bytes(d: DisplacementField) -> bytes:
    header = _mhd_header_text(d.dims, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0),
                              "MET_FLOAT", "LOCAL", channels=3)
    return header.encode("ascii") + np.ascontiguousarray(d.data, dtype="<f4").tobytes()


def _png_bytes(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(pixels, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def _parse_upload(upload: UploadFile, field_name: str, limit: int) -> Volume3:
    data = upload.file.read(limit + 1)
    if len(data) > limit:
        raise ApiError(413, "payload_too_large",
                       f"{field_name} exceeds the {limit} byte upload limit",
                       field=field_name)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, f"{field_name}.mha")
        with open(path, "wb") as f:
            f.write(data)
        try:
            return load_volume(path)
        except (OSError, FormatError, PayloadSizeError, ValueError) as err:
            raise ApiError(400, "bad_volume",
                           f"{field_name} is not a readable single-file volume "
                           f"(.mha with inline payload): {err}", field=field_name)


def _parse_window(text: str | None, default: tuple[float, float]) -> tuple[float, float]:
    if text is None:
        return default
    parts = text.split(",")
    if len(parts) == 2:
        try:
            lo, hi = float(parts[0]), float(parts[1])
        except ValueError:
            lo, hi = None, None
        if lo is not None and lo < hi:
            return lo, hi
    raise ApiError(422, "invalid_request",
                   f"window must be lo,hi with lo < hi, got {text!r}", field="window")


def _parse_triple(text: str, field_name: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) == 3:
        try:
            a, b, c = int(parts[0]), int(parts[1]), int(parts[2])
            return a, b, c
        except ValueError:
            pass
    raise ApiError(422, "invalid_request",
                   f"{field_name} must be three comma-separated integers, got {text!r}",
                   field=field_name)


def _parse_roi_query(text: str) -> RoiBox:
    parts = text.split(",")
    if len(parts) == 6:
        try:
            vals = [int(p) for p in parts]
            return RoiBox(tuple(vals[:3]), tuple(vals[3:]))
        except ValueError:
            pass
    raise ApiError(422, "invalid_roi",
                   f"roi must be x0,y0,z0,x1,y1,z1, got {text!r}", field="roi")


# ----------------------------------------------------------------- the app

def create_app(store_path: str | None = None,
               max_upload_bytes: int = DEFAULT_MAX_UPLOAD_BYTES) -> FastAPI:
    app = FastAPI(title="boxreg session service", docs_url=None, redoc_url=None)
    manager = SessionManager(store_path=store_path, max_upload_bytes=max_upload_bytes)
    app.state.manager = manager

    # The reviewer UI is served from its own origin (any static file host);
    # the API carries no credentials, so a wildcard is safe here.
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])

    @app.exception_handler(ApiError)
    async def handle_api_error(request: Request, err: ApiError):
        return JSONResponse(status_code=err.status, content=err.body())

    @app.exception_handler(RequestValidationError)
    async def handle_validation_error(request: Request, err: RequestValidationError):
        errors = err.errors()
        first = errors[0] if errors else {}
        loc = ".".join(str(p) for p in first.get("loc", []) if p != "body")
        # A malformed create request (missing/garbled multipart) is a 400;
        # bad parameters elsewhere are 422s.
        status = 400 if request.url.path.rstrip("/") == "/sessions" else 422
        body = {"code": "invalid_request", "message": first.get("msg", "invalid request")}
        if loc:
            body["field"] = loc
        return JSONResponse(status_code=status, content=body)

    @app.exception_handler(StarletteHTTPException)
    async def handle_http_error(request: Request, err: StarletteHTTPException):
        code = {404: "not_found", 405: "method_not_allowed"}.get(err.status_code, "http_error")
        return JSONResponse(status_code=err.status_code,
                            content={"code": code, "message": str(err.detail)})

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/sessions")
    def list_sessions():
        rows = [{"id": ms.id, "created_at": ms.created_at,
                 "state": ms.state, "stage": ms.session.stage.value}
                for ms in manager.sessions.values()]
        return {"sessions": sorted(rows, key=lambda r: r["created_at"])}

    @app.post("/sessions", status_code=201)
    def create_session(fixed: UploadFile = File(...), moving: UploadFile = File(...),
                       config: str | None = Form(None)):
        cfg = {}
        if config:
            try:
                cfg = json.loads(config)
                if not isinstance(cfg, dict):
                    raise ValueError("config must be a JSON object")
            except ValueError as err:
                raise ApiError(400, "invalid_config", f"config: {err}", field="config")
        fixed_vol = _parse_upload(fixed, "fixed", manager.max_upload_bytes)
        moving_vol = _parse_upload(moving, "moving", manager.max_upload_bytes)
        if fixed_vol.dims != moving_vol.dims:
            raise ApiError(422, "dim_mismatch",
                           f"fixed dims {list(fixed_vol.dims)} != "
                           f"moving dims {list(moving_vol.dims)}")
        ms = manager.create(fixed_vol, moving_vol, cfg)
        return {"id": ms.id, "created_at": ms.created_at,
                "dims": list(fixed_vol.dims), "init": ms.session.init_label}

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        return manager.get(session_id).handle_dict()

    @app.post("/sessions/{session_id}/iso", status_code=202)
    def start_iso(session_id: str, payload: dict | None = None):
        ms = manager.get(session_id)
        iterations = _iterations_from(payload, default=100)

        def runner():
            engine.run_iso(ms.session, iterations=iterations,
                           callback=_progress_callback(ms))

        manager.start_job(ms, "ISO", runner)
        return {"job": "iso", "iterations": iterations, "state": "running"}

    @app.post("/sessions/{session_id}/rso", status_code=202)
    def start_rso(session_id: str, payload: dict | None = None):
        ms = manager.get(session_id)
        if not isinstance(payload, dict) or "roi" not in payload:
            raise ApiError(422, "invalid_request",
                           "body must include a roi: {min: [x,y,z], max: [x,y,z]}",
                           field="roi")
        roi = _roi_from_dict(payload["roi"], "roi")
        _validate_roi(roi, ms.session.fixed.dims, "roi")
        iterations = _iterations_from(payload, default=400)

        def runner():
            engine.run_rso(ms.session, roi, iterations=iterations,
                           callback=_progress_callback(ms))

        manager.start_job(ms, "RSO", runner)
        return {"job": "rso", "iterations": iterations,
                "roi": _roi_dict(roi), "state": "running"}

    @app.get("/sessions/{session_id}/trace")
    def get_trace(session_id: str, since: int = -1):
        ms = manager.get(session_id)
        rows = [e.to_json_dict() for e in ms.session.loss_trace.rows_since(since)]
        return {"rows": rows, "last_iteration": ms.session.loss_trace.last_iteration}

    @app.get("/sessions/{session_id}/slice")
    def get_slice(session_id: str, volume: str = "fixed", axis: str = "z",
                  index: int = 0, window: str | None = None):
        ms = manager.get(session_id)
        s = ms.session
        if volume == "fixed":
            vol, default_window = s.fixed, ANATOMY_WINDOW
        elif volume == "moving":
            vol, default_window = s.moving, ANATOMY_WINDOW
        elif volume == "warped":
            vol, default_window = warp(s.moving, s.dvf), ANATOMY_WINDOW
        elif volume == "diff":
            warped = warp(s.moving, s.dvf)
            vol = s.fixed.with_data(s.fixed.data.astype(np.float64)
                                    - warped.data.astype(np.float64))
            default_window = DIFF_WINDOW
        else:
            raise ApiError(422, "invalid_request",
                           f"volume must be fixed|moving|warped|diff, got {volume!r}",
                           field="volume")
        lo, hi = _parse_window(window, default_window)
        try:
            plane = extract_slice(vol, axis, index)
        except ValueError as err:
            raise ApiError(422, "invalid_request", str(err), field="axis")
        except IndexError as err:
            raise ApiError(422, "invalid_request", str(err), field="index")
        png = _png_bytes(window_level(plane, lo, hi).pixels)
        return Response(content=png, media_type="image/png",
                        headers={"Cache-Control": "no-store"})

    @app.post("/sessions/{session_id}/cancel", status_code=202)
    def cancel(session_id: str):
        return manager.cancel(manager.get(session_id))

    @app.post("/sessions/{session_id}/accept")
    def accept(session_id: str):
        return manager.accept(manager.get(session_id))

    @app.get("/sessions/{session_id}/metrics")
    def metrics(session_id: str, roi: str | None = None):
        ms = manager.get(session_id)
        s = ms.session
        warped = warp(s.moving, s.dvf)
        out = {"full_rmse": rmse(s.fixed, warped), "units": "HU",
               "at_iteration": s.loss_trace.last_iteration}
        if roi is not None:
            box = _parse_roi_query(roi)
            _validate_roi(box, s.fixed.dims, "roi")
            out["roi_rmse"] = rmse(s.fixed, warped, mask=box)
            out["roi"] = _roi_dict(box)
        return out

    @app.get("/sessions/{session_id}/diagnose")
    def diagnose(session_id: str, blocks: str):
        ms = manager.get(session_id)
        bx, by, bz = _parse_triple(blocks, "blocks")
        if min(bx, by, bz) < 1:
            raise ApiError(422, "invalid_request",
                           f"block sizes must be >= 1, got {blocks!r}", field="blocks")
        partition = RegionPartition.from_blocks(ms.session.fixed.dims, (bx, by, bz))
        report = engine.diagnose(ms.session, partition)
        d = report.to_json_dict()
        d["blocks"] = [bx, by, bz]
        return d

    @app.get("/sessions/{session_id}/dvf")
    def download_dvf(session_id: str):
        ms = manager.get(session_id)
        return Response(content=_dvf_bytes(ms.session.dvf),
                        media_type="application/octet-stream",
                        headers={"Content-Disposition":
                                 f'attachment; filename="dvf-{session_id}.mha"'})

    @app.get("/sessions/{session_id}/warped")
    def download_warped(session_id: str):
        ms = manager.get(session_id)
        warped = warp(ms.session.moving, ms.session.dvf)
        return Response(content=_volume_bytes(warped),
                        media_type="application/octet-stream",
                        headers={"Content-Disposition":
                                 f'attachment; filename="warped-{session_id}.mha"'})

    return app


def _iterations_from(payload: dict | None, default: int) -> int:
    if payload is None or "iterations" not in payload:
        return default
    try:
        n = int(payload["iterations"])
    except (TypeError, ValueError):
        raise ApiError(422, "invalid_request",
                       f"iterations must be an integer, got {payload['iterations']!r}",
                       field="iterations")
    if n < 0:
        raise ApiError(422, "invalid_request",
                       f"iterations must be >= 0, got {n}", field="iterations")
    return n


def _progress_callback(ms: ManagedSession):
    def on_iteration(session: Session, entry: TraceEntry) -> None:
        ms.iteration = entry.iteration

    return on_iteration


# --------------------------------------------------------------------- main

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="boxreg-service",
        description="HTTP session service for interactive registration review.")
    parser.add_argument("--host", default=os.environ.get("BOXREG_HOST", "127.0.0.1"))
    parser.add_argument("--port", type=int,
                        default=int(os.environ.get("BOXREG_PORT", "8008")))
    parser.add_argument("--store", default=os.environ.get("BOXREG_STORE"),
                        help="directory for session persistence (optional)")
    parser.add_argument("--max-upload-mb", type=int,
                        default=int(os.environ.get("BOXREG_MAX_UPLOAD_MB", "256")))
    args = parser.parse_args(argv)

    import uvicorn
    app = create_app(store_path=args.store,
                     max_upload_bytes=args.max_upload_mb * 1024 * 1024)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


if __name__ == "__main__":
    import sys
    sys.exit(main())
