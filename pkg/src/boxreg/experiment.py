"""Paired-arm comparison: full-image-only refinement vs the interactive
full-image + region-masked schedule.

Both arms share one initializer state and one optimizer configuration.
The first arm runs the whole budget on the full-image loss in a single
uninterrupted phase; the second runs the standard split (full-image
refinement, then region-masked refinement on the reviewer's box). Alignment
quality is reported as RMSE in HU inside and outside the box, optionally
against separate evaluation volumes — with synthetic data, passing the
artifact-free anatomies isolates true alignment from the artifact floor.

The pinned configuration in ``saturation_experiment_config`` is the
measured operating point where the full-image arm stalls on the region
while the masked arm recovers it. The mechanism is the balance between the
data term and the smoothness term: averaging the intensity loss over the
whole volume dilutes the region's per-voxel gradient below the regularizer
pull (and the artifact-driven gradients around it), while restricting the
mean to the box re-amplifies the data term by the volume ratio. Learning
rates here are tuned for direct per-voxel displacement optimization at this
volume size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .volume import Volume3, rmse
from .transform import DisplacementField, RoiBox, warp
from .loss import LossConfig
from .engine import (OptimizerConfig, CoarseToFineInit, IdentityInit, Session,
                     init_session, run_iso, run_rso)


@dataclass(frozen=True)
class ExperimentConfig:
    loss: LossConfig = field(default_factory=lambda: LossConfig(reg_weight=0.3))
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(learning_rate=0.1))
    init: CoarseToFineInit | IdentityInit = field(default_factory=lambda: CoarseToFineInit(
        levels=2, iterations_per_level=40, learning_rate=0.02))
    iso_only_iters: int = 500
    combo_iso_iters: int = 100
    combo_rso_iters: int = 400


def saturation_experiment_config() -> ExperimentConfig:
    """The pinned, measured operating point used by the acceptance run."""
    return ExperimentConfig()


@dataclass
class ComparisonResult:
    roi: RoiBox
    iso_session: Session
    combo_session: Session
    metrics: dict

    def to_json_dict(self) -> dict:
        return {"roi": {"min_corner": list(self.roi.min_corner),
                        "max_corner": list(self.roi.max_corner)},
                "metrics": self.metrics}

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_json_dict(), indent=indent)


def run_comparison(fixed: Volume3, moving: Volume3, roi: RoiBox,
                   cfg: ExperimentConfig | None = None,
                   eval_fixed: Volume3 | None = None,
                   eval_moving: Volume3 | None = None) -> ComparisonResult:
    """Run both arms and collect side-by-side metrics.

    ``eval_fixed``/``eval_moving`` default to the registration inputs; pass
    reference volumes (e.g. artifact-free anatomies) to measure alignment
    against them instead. All RMSE metrics are in HU.
    """
    cfg = cfg or ExperimentConfig()
    roi.validate(fixed.dims)
    ef = eval_fixed if eval_fixed is not None else fixed
    em = eval_moving if eval_moving is not None else moving
    if ef.dims != fixed.dims or em.dims != fixed.dims:
        raise ValueError("evaluation volumes must match the input dims")

    def roi_rmse(dvf: DisplacementField) -> float:
        return rmse(ef, warp(em, dvf), mask=roi)

    def full_rmse(dvf: DisplacementField) -> float:
        return rmse(ef, warp(em, dvf))

    base = init_session(fixed, moving, cfg.loss, init=cfg.init,
                        optimizer=cfg.optimizer, monitor_roi=roi)
    rmse_init = roi_rmse(base.dvf)
    full_init = full_rmse(base.dvf)

    # Arm 1: the whole budget on the full-image loss, one uninterrupted run.
    iso_session = base.clone()
    mid_mark = cfg.combo_iso_iters
    mid_snapshot: dict[int, DisplacementField] = {}

    def keep_mid(sess, entry):
        if entry.iteration == mid_mark:
            mid_snapshot[mid_mark] = sess.dvf

    run_iso(iso_session, iterations=cfg.iso_only_iters, callback=keep_mid)
    rmse_iso_only = roi_rmse(iso_session.dvf)
    rmse_iso_mid = roi_rmse(mid_snapshot[mid_mark]) if mid_mark in mid_snapshot else None

    # Arm 2: the split schedule with the reviewer's box.
    combo_session = base.clone()
    run_iso(combo_session, iterations=cfg.combo_iso_iters)
    run_rso(combo_session, roi, iterations=cfg.combo_rso_iters)
    rmse_combo = roi_rmse(combo_session.dvf)

    early = rmse_init - rmse_iso_mid if rmse_iso_mid is not None else None
    late = rmse_iso_mid - rmse_iso_only if rmse_iso_mid is not None else None
    saturation_ratio = (late / early) if early is not None and early > 0 else None
    benefit_ratio = rmse_combo / rmse_iso_only if rmse_iso_only > 0 else None

    by_iter = {e.iteration: e for e in combo_session.loss_trace.entries}
    combo_end = cfg.combo_iso_iters + cfg.combo_rso_iters
    metrics = {
        "roi_rmse_init": rmse_init,
        "roi_rmse_iso_mid": rmse_iso_mid,
        "roi_rmse_iso_only": rmse_iso_only,
        "roi_rmse_combo": rmse_combo,
        "full_rmse_init": full_init,
        "full_rmse_iso_only": full_rmse(iso_session.dvf),
        "full_rmse_combo": full_rmse(combo_session.dvf),
        "saturation_ratio": saturation_ratio,
        "benefit_ratio": benefit_ratio,
        "roi_loss_at_iso_end": by_iter[cfg.combo_iso_iters].roi_loss
            if cfg.combo_iso_iters in by_iter else None,
        "roi_loss_at_combo_end": by_iter[combo_end].roi_loss
            if combo_end in by_iter else None,
        "iso_only_iters": cfg.iso_only_iters,
        "combo_iso_iters": cfg.combo_iso_iters,
        "combo_rso_iters": cfg.combo_rso_iters,
        "evaluated_against_reference": eval_fixed is not None,
    }
    return ComparisonResult(roi=roi, iso_session=iso_session,
                            combo_session=combo_session, metrics=metrics)
