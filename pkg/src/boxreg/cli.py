"""Command-line frontend: phantom generation, registration, arm comparison,
gradient diagnostics, and slice rendering.

Exit codes are a stable scripting contract:

  0  success
  2  argument error (bad flag values, inconsistent with the loaded data)
  3  data error (missing/corrupt files, incompatible volumes, bad spec)
  4  numeric failure (non-finite loss or gradient during optimization)
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np
from PIL import Image

from .engine import (CoarseToFineInit, IdentityInit, NumericError, RunConfig,
                     export_trace, init_session, run_iso, run_rso)
from .loss import LossConfig, RegionPartition, gradient_share
from .phantom import PhantomSpec, generate, lesion_roi
from .transform import RoiBox, dvf_stats, load_dvf, save_dvf, warp
from .volume import (FormatError, PayloadSizeError, Volume3, extract_slice,
                     load_volume, rmse, save_volume, window_level)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class CliError(Exception):
    """Error with a preassigned exit code; message goes to stderr."""

    def __init__(self, exit_code: int, message: str):
        super().__init__(message)
        self.exit_code = exit_code


# ------------------------------------------------------------ flag parsing

def _roi_flag(text: str) -> RoiBox:
    parts = text.split(",")
    if len(parts) != 6:
        raise argparse.ArgumentTypeError(
            f"ROI must be x0,y0,z0,x1,y1,z1 (inclusive voxel indices), got {text!r}")
    try:
        x0, y0, z0, x1, y1, z1 = (int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"ROI components must be integers, got {text!r}")
    try:
        return RoiBox((x0, y0, z0), (x1, y1, z1))
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err))


def _blocks_flag(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"blocks must be bx,by,bz, got {text!r}")
    try:
        bx, by, bz = (int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"block sizes must be integers, got {text!r}")
    if min(bx, by, bz) < 1:
        raise argparse.ArgumentTypeError(f"block sizes must be >= 1, got {text!r}")
    return bx, by, bz


def _combo_flag(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"combo must be iso_iters,rso_iters, got {text!r}")
    try:
        a, b = int(parts[0]), int(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"combo budgets must be integers, got {text!r}")
    if a < 0 or b < 0:
        raise argparse.ArgumentTypeError(f"combo budgets must be >= 0, got {text!r}")
    return a, b


def _nonneg_int(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if n < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {n}")
    return n


# -------------------------------------------------------------- file helpers

def _load_volume_file(path: str, flag: str) -> Volume3:
    try:
        return load_volume(path)
    except (OSError, FormatError, PayloadSizeError, ValueError) as err:
        raise CliError(EXIT_DATA, f"--{flag} {path}: {err}")


def _load_dvf_file(path: str, flag: str):
    try:
        return load_dvf(path)
    except (OSError, FormatError, PayloadSizeError, ValueError) as err:
        raise CliError(EXIT_DATA, f"--{flag} {path}: {err}")


def _check_roi(roi: RoiBox, dims: tuple[int, int, int]) -> RoiBox:
    try:
        return roi.validate(dims)
    except ValueError as err:
        raise CliError(EXIT_USAGE, f"--roi: {err}")


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="ascii") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _ensure_outdir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _roi_json(roi: RoiBox) -> dict:
    return {"min_corner": list(roi.min_corner), "max_corner": list(roi.max_corner)}


# --------------------------------------------------------------- subcommands

def cmd_phantom(args) -> int:
    """Generate the synthetic pair and write it as MHD volumes + field."""
    if args.spec is not None:
        try:
            with open(args.spec, "r", encoding="utf-8") as f:
                spec = PhantomSpec.from_json(f.read())
        except OSError as err:
            raise CliError(EXIT_DATA, f"--spec {args.spec}: {err}")
        except (ValueError, KeyError, TypeError) as err:
            raise CliError(EXIT_DATA, f"--spec {args.spec}: invalid spec: {err}")
    else:
        spec = PhantomSpec()
    try:
        pair = generate(spec)
    except ValueError as err:
        raise CliError(EXIT_DATA, f"invalid spec: {err}")

    out = _ensure_outdir(args.out)
    save_volume(pair.fixed, os.path.join(out, "fixed.mhd"))
    save_volume(pair.moving, os.path.join(out, "moving.mhd"))
    save_volume(pair.fixed_clean, os.path.join(out, "fixed_clean.mhd"))
    save_volume(pair.moving_clean, os.path.join(out, "moving_clean.mhd"))
    save_dvf(pair.gt_dvf, os.path.join(out, "gt_dvf.mhd"))
    with open(os.path.join(out, "spec.json"), "w", encoding="ascii") as f:
        f.write(spec.to_json() + "\n")
    roi = lesion_roi(spec)
    _write_json(os.path.join(out, "manifest.json"), {
        "dims": list(spec.dims),
        "files": ["fixed.mhd", "moving.mhd", "fixed_clean.mhd",
                  "moving_clean.mhd", "gt_dvf.mhd", "spec.json"],
        "suggested_roi": _roi_json(roi),
        "gt_dvf_stats": dvf_stats(pair.gt_dvf),
    })
    print(f"phantom written to {out} (dims {spec.dims[0]}x{spec.dims[1]}x{spec.dims[2]})")
    return EXIT_OK


def cmd_register(args) -> int:
    """Initialize, refine on the full image, then refine each listed box."""
    fixed = _load_volume_file(args.fixed, "fixed")
    moving = _load_volume_file(args.moving, "moving")
    if fixed.dims != moving.dims:
        raise CliError(EXIT_DATA,
                       f"volume dims differ: fixed {fixed.dims} vs moving {moving.dims}")

    run_cfg = RunConfig()
    if args.config is not None:
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                run_cfg = RunConfig.from_json_dict(json.load(f))
        except OSError as err:
            raise CliError(EXIT_DATA, f"--config {args.config}: {err}")
        except (ValueError, KeyError, TypeError) as err:
            raise CliError(EXIT_DATA, f"--config {args.config}: invalid config: {err}")
    iso_iters = args.iso_iters if args.iso_iters is not None else run_cfg.iso_iters
    rso_iters = args.rso_iters if args.rso_iters is not None else run_cfg.rso_iters

    rois = [_check_roi(r, fixed.dims) for r in (args.roi or [])]
    init = CoarseToFineInit() if args.init == "coarse" else IdentityInit()

    try:
        session = init_session(fixed, moving, run_cfg.loss, init=init,
                               optimizer=run_cfg.optimizer,
                               monitor_roi=rois[0] if rois else None)
    except NumericError as err:
        raise CliError(EXIT_NUMERIC, f"numeric failure during initialization: {err}")
    try:
        run_iso(session, iterations=iso_iters)
    except NumericError as err:
        raise CliError(EXIT_NUMERIC,
                       f"numeric failure during full-image refinement: {err}")
    for roi in rois:
        try:
            run_rso(session, roi, iterations=rso_iters)
        except NumericError as err:
            raise CliError(EXIT_NUMERIC,
                           f"numeric failure during box refinement {_roi_json(roi)}: {err}")

    out = _ensure_outdir(args.out)
    warped = warp(moving, session.dvf)
    save_dvf(session.dvf, os.path.join(out, "dvf.mha"))
    save_volume(warped, os.path.join(out, "warped.mha"))
    # wall_ms is the only nondeterministic column; leave it out so repeated
    # runs produce byte-identical artifacts.
    with open(os.path.join(out, "trace.csv"), "w", encoding="ascii") as f:
        f.write(export_trace(session, "csv", include_wall_ms=False))

    metrics = {
        "full_rmse_before": rmse(fixed, moving),
        "full_rmse": rmse(fixed, warped),
        "rois": [{"roi": _roi_json(r),
                  "rmse_before": rmse(fixed, moving, mask=r),
                  "rmse": rmse(fixed, warped, mask=r)} for r in rois],
        "units": "HU",
    }
    _write_json(os.path.join(out, "metrics.json"), metrics)
    _write_json(os.path.join(out, "session.json"), {
        "stage": session.stage.value,
        "init": session.init_label,
        "iso_iters": iso_iters,
        "rso_iters": rso_iters,
        "seed": args.seed if args.seed is not None else run_cfg.seed,
        "loss": {"kind": run_cfg.loss.kind, "reg_weight": run_cfg.loss.reg_weight,
                 "normalize_inputs": run_cfg.loss.normalize_inputs},
        "optimizer": run_cfg.optimizer.to_json_dict(),
        "roi_history": [_roi_json(r) for r in session.roi_history],
        "last_iteration": session.loss_trace.last_iteration,
        "dvf_stats": dvf_stats(session.dvf),
    })
    print(f"registered: full RMSE {metrics['full_rmse_before']:.2f} -> "
          f"{metrics['full_rmse']:.2f} HU; outputs in {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    """Run the two refinement budgets side by side and report both curves."""
    fixed = _load_volume_file(args.fixed, "fixed")
    moving = _load_volume_file(args.moving, "moving")
    if fixed.dims != moving.dims:
        raise CliError(EXIT_DATA,
                       f"volume dims differ: fixed {fixed.dims} vs moving {moving.dims}")
    roi = _check_roi(args.roi, fixed.dims)
    eval_fixed = (_load_volume_file(args.eval_fixed, "eval-fixed")
                  if args.eval_fixed else None)
    eval_moving = (_load_volume_file(args.eval_moving, "eval-moving")
                   if args.eval_moving else None)
    for name, vol in (("eval-fixed", eval_fixed), ("eval-moving", eval_moving)):
        if vol is not None and vol.dims != fixed.dims:
            raise CliError(EXIT_DATA, f"--{name}: dims {vol.dims} differ from "
                                      f"registration input {fixed.dims}")

    from .experiment import run_comparison, saturation_experiment_config
    cfg = dataclasses.replace(saturation_experiment_config(),
                              iso_only_iters=args.iso_only_iters,
                              combo_iso_iters=args.combo[0],
                              combo_rso_iters=args.combo[1])

    try:
        result = run_comparison(fixed, moving, roi, cfg,
                                eval_fixed=eval_fixed, eval_moving=eval_moving)
    except NumericError as err:
        raise CliError(EXIT_NUMERIC, f"numeric failure during comparison: {err}")

    out = _ensure_outdir(args.out)
    report = result.to_json_dict()
    report["benefit_ratio_undefined"] = result.metrics["benefit_ratio"] is None
    report["saturation_ratio_undefined"] = result.metrics["saturation_ratio"] is None
    _write_json(os.path.join(out, "report.json"), report)
    with open(os.path.join(out, "trace_iso.csv"), "w", encoding="ascii") as f:
        f.write(export_trace(result.iso_session, "csv", include_wall_ms=False))
    with open(os.path.join(out, "trace_combo.csv"), "w", encoding="ascii") as f:
        f.write(export_trace(result.combo_session, "csv", include_wall_ms=False))

    m = result.metrics
    sat = ("n/a" if m["saturation_ratio"] is None else f"{m['saturation_ratio']:.4f}")
    ben = ("undefined (both arms at zero)" if m["benefit_ratio"] is None
           else f"{m['benefit_ratio']:.4f}")
    print(f"box RMSE: init {m['roi_rmse_init']:.2f}, "
          f"full-image-only {m['roi_rmse_iso_only']:.2f}, "
          f"combined {m['roi_rmse_combo']:.2f} HU")
    print(f"saturation ratio {sat}; benefit ratio {ben}; outputs in {out}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    """Report each block's share of the full-image loss gradient."""
    fixed = _load_volume_file(args.fixed, "fixed")
    moving = _load_volume_file(args.moving, "moving")
    dvf = _load_dvf_file(args.dvf, "dvf")
    if fixed.dims != moving.dims or fixed.dims != dvf.dims:
        raise CliError(EXIT_DATA, f"dims differ: fixed {fixed.dims}, "
                                  f"moving {moving.dims}, field {dvf.dims}")
    partition = RegionPartition.from_blocks(fixed.dims, args.blocks)
    cfg = LossConfig(reg_weight=0.0)
    report = gradient_share(fixed, moving, dvf, partition, cfg)
    d = report.to_json_dict()
    d["blocks"] = list(args.blocks)
    _write_json(args.out, d)
    top = max(report.regions, key=lambda r: r.grad_fraction)
    print(f"{len(report.regions)} blocks; top gradient share: "
          f"block {top.id} at {top.grad_fraction:.4f}; report in {args.out}")
    return EXIT_OK


def cmd_slice(args) -> int:
    """Render one plane of a volume (optionally minus a second volume) to PNG."""
    vol = _load_volume_file(args.volume, "volume")
    if args.minus is not None:
        other = _load_volume_file(args.minus, "minus")
        if other.dims != vol.dims:
            raise CliError(EXIT_DATA, f"--minus: dims {other.dims} differ from "
                                      f"--volume {vol.dims}")
        vol = vol.with_data(vol.data.astype(np.float64) - other.data.astype(np.float64))
    try:
        plane = extract_slice(vol, args.axis, args.index)
    except IndexError as err:
        raise CliError(EXIT_USAGE, f"--index: {err}")
    lo, hi = args.window
    if lo >= hi:
        raise CliError(EXIT_USAGE, f"--window requires lo < hi, got [{lo:g}, {hi:g}]")
    img = window_level(plane, lo, hi)
    Image.fromarray(img.pixels, mode="L").save(args.out, format="PNG")
    print(f"wrote {img.width}x{img.height} slice (axis {args.axis}, "
          f"index {args.index}, window [{lo:g}, {hi:g}] HU) to {args.out}")
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boxreg",
        description="Deformable 3-D registration with box-targeted refinement.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic test pair")
    p.add_argument("--spec", default=None, help="JSON spec file (defaults built in)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("register", help="register one pair end to end")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--config", default=None, help="JSON run config")
    p.add_argument("--iso-iters", type=_nonneg_int, default=None,
                   help="full-image refinement steps (default 100)")
    p.add_argument("--rso-iters", type=_nonneg_int, default=None,
                   help="box refinement steps per ROI (default 400)")
    p.add_argument("--roi", type=_roi_flag, action="append", default=None,
                   metavar="x0,y0,z0,x1,y1,z1",
                   help="inclusive voxel box; repeatable, run in order")
    p.add_argument("--init", choices=("identity", "coarse"), default="identity")
    p.add_argument("--seed", type=int, default=None,
                   help="recorded in session.json (the pipeline is deterministic)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("compare", help="full-image-only vs combined budgets")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--roi", type=_roi_flag, required=True, metavar="x0,y0,z0,x1,y1,z1")
    p.add_argument("--iso-only-iters", type=_nonneg_int, default=500)
    p.add_argument("--combo", type=_combo_flag, default=(100, 400),
                   metavar="ISO,RSO", help="budgets for the combined arm")
    p.add_argument("--eval-fixed", default=None,
                   help="reference volume for RMSE (defaults to --fixed)")
    p.add_argument("--eval-moving", default=None,
                   help="reference volume for RMSE (defaults to --moving)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("diagnose", help="per-block gradient share report")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--dvf", required=True)
    p.add_argument("--blocks", type=_blocks_flag, required=True, metavar="bx,by,bz")
    p.add_argument("--out", required=True, help="output JSON file")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("slice", help="render a slice to an 8-bit PNG")
    p.add_argument("--volume", required=True)
    p.add_argument("--minus", default=None,
                   help="optional volume to subtract before rendering")
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--window", type=float, nargs=2, default=(-1000.0, 500.0),
                   metavar=("LO", "HI"), help="display window in HU, e.g. --window -500 500")
    p.add_argument("--out", required=True, help="output PNG file")
    p.set_defaults(func=cmd_slice)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad arguments and 0 for --help; keep its code
        # but return instead of exiting so main() stays embeddable.
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    except NumericError as err:
        print(f"error: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
