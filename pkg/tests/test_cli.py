"""End-to-end tests of the command-line frontend.

Everything runs in-process through ``cli.main(argv)`` on a small synthetic
pair so the whole file stays fast; exit codes and on-disk artifacts are the
contract under test.
"""

import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

import boxreg.engine
from boxreg.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from boxreg.transform import load_dvf
from boxreg.volume import load_volume, save_volume

SMALL_SPEC = {
    "dims": [24, 24, 24],
    "body": {"center": [11.5, 11.5, 11.5], "radii": [9, 9, 10], "intensity": 0},
    "lungs": [{"center": [8, 11, 12], "radii": [3.5, 4, 5], "intensity": -800}],
    "lesion": {"center": [8, 11, 13], "radius": 2, "intensity": 100},
    "gt_deformation": [{"center": [8, 11, 13], "sigma": 3,
                        "amplitude": [1.0, -1.0, 0.5]}],
    "artifact": {"streak_count": 10, "amplitude": 300, "streak_sigma": 1.2,
                 "seed_fixed": 101, "seed_moving": 202},
    "noise_sigma": 10,
    "rng_seed": 7,
}
ROI_FLAG = "4,7,9,12,15,17"


def sha256(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def spec_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("spec") / "spec.json"
    p.write_text(json.dumps(SMALL_SPEC))
    return p


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory, spec_file):
    out = tmp_path_factory.mktemp("phantom")
    assert main(["phantom", "--spec", str(spec_file), "--out", str(out)]) == EXIT_OK
    return out


# ------------------------------------------------------------------ phantom

def test_phantom_writes_reloadable_volumes(phantom_dir):
    fixed = load_volume(str(phantom_dir / "fixed.mhd"))
    moving = load_volume(str(phantom_dir / "moving.mhd"))
    gt = load_dvf(str(phantom_dir / "gt_dvf.mhd"))
    assert fixed.dims == moving.dims == gt.dims == (24, 24, 24)
    manifest = json.loads((phantom_dir / "manifest.json").read_text())
    for name in manifest["files"]:
        assert (phantom_dir / name).exists()


def test_phantom_same_seed_same_hashes(phantom_dir, spec_file, tmp_path):
    out2 = tmp_path / "again"
    assert main(["phantom", "--spec", str(spec_file), "--out", str(out2)]) == EXIT_OK
    for name in ("fixed.raw", "moving.raw", "gt_dvf.raw", "fixed.mhd"):
        assert sha256(phantom_dir / name) == sha256(out2 / name), name


def test_phantom_bad_spec_names_field(tmp_path, capsys):
    bad = dict(SMALL_SPEC, body={"center": [11.5, 11.5, 11.5],
                                 "radii": [0, 9, 10], "intensity": 0})
    spec = tmp_path / "bad.json"
    spec.write_text(json.dumps(bad))
    assert main(["phantom", "--spec", str(spec), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert "body.radii" in capsys.readouterr().err


def test_phantom_unreadable_spec_is_data_error(tmp_path):
    assert main(["phantom", "--spec", str(tmp_path / "none.json"),
                 "--out", str(tmp_path / "o")]) == EXIT_DATA


# ----------------------------------------------------------------- register

def register_args(phantom_dir, out, *extra):
    return ["register", "--fixed", str(phantom_dir / "fixed.mhd"),
            "--moving", str(phantom_dir / "moving.mhd"), "--out", str(out), *extra]


@pytest.fixture(scope="module")
def fast_config(tmp_path_factory):
    """Step sizes large enough for visible movement in a few iterations."""
    p = tmp_path_factory.mktemp("cfg") / "run.json"
    p.write_text(json.dumps({"loss": {"reg_weight": 0.01},
                             "optimizer": {"learning_rate": 0.05}}))
    return p


def test_register_twice_identical_artifacts(phantom_dir, fast_config, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = main(register_args(phantom_dir, out, "--config", str(fast_config),
                                  "--iso-iters", "4", "--rso-iters", "4",
                                  "--roi", ROI_FLAG))
        assert code == EXIT_OK
        outs.append(out)
    a, b = outs
    for name in ("dvf.mha", "warped.mha", "trace.csv", "metrics.json", "session.json"):
        assert sha256(a / name) == sha256(b / name), name


def test_register_zero_iters_is_initializer_output(phantom_dir, tmp_path):
    out = tmp_path / "ident"
    assert main(register_args(phantom_dir, out, "--iso-iters", "0")) == EXIT_OK
    moving = load_volume(str(phantom_dir / "moving.mhd"))
    warped = load_volume(str(out / "warped.mha"))
    assert np.array_equal(warped.data, moving.data)
    assert not load_dvf(str(out / "dvf.mha")).data.any()
    trace = (out / "trace.csv").read_text().splitlines()
    assert trace == ["iteration,phase,full_loss,roi_loss,roi_id"]


def test_register_trace_has_no_timing_column(phantom_dir, fast_config, tmp_path):
    out = tmp_path / "r"
    assert main(register_args(phantom_dir, out, "--config", str(fast_config),
                              "--iso-iters", "3", "--rso-iters", "2",
                              "--roi", ROI_FLAG)) == EXIT_OK
    lines = (out / "trace.csv").read_text().splitlines()
    assert lines[0] == "iteration,phase,full_loss,roi_loss,roi_id"
    assert len(lines) == 1 + 3 + 2
    assert lines[-1].startswith("5,RSO,")


def test_register_two_rois_recorded_in_order(phantom_dir, fast_config, tmp_path):
    out = tmp_path / "two"
    second = "10,10,10,15,15,15"
    assert main(register_args(phantom_dir, out, "--config", str(fast_config),
                              "--iso-iters", "2", "--rso-iters", "2",
                              "--roi", ROI_FLAG, "--roi", second)) == EXIT_OK
    dump = json.loads((out / "session.json").read_text())
    assert len(dump["roi_history"]) == 2
    assert dump["roi_history"][0]["min_corner"] == [4, 7, 9]
    assert dump["roi_history"][1]["min_corner"] == [10, 10, 10]
    metrics = json.loads((out / "metrics.json").read_text())
    assert len(metrics["rois"]) == 2
    assert metrics["units"] == "HU"


def test_register_box_refinement_improves_box_rmse(phantom_dir, fast_config, tmp_path):
    """Paired runs: same budget of full-image steps, with and without the
    box-refinement stage; the box RMSE must drop when the stage runs."""
    iso_only = tmp_path / "iso_only"
    with_box = tmp_path / "with_box"
    for out, rso in ((iso_only, "0"), (with_box, "40")):
        assert main(register_args(phantom_dir, out, "--config", str(fast_config),
                                  "--iso-iters", "8", "--rso-iters", rso,
                                  "--roi", ROI_FLAG)) == EXIT_OK
    rmse_iso = json.loads((iso_only / "metrics.json").read_text())["rois"][0]["rmse"]
    rmse_box = json.loads((with_box / "metrics.json").read_text())["rois"][0]["rmse"]
    assert rmse_box < rmse_iso


def test_register_dim_mismatch_is_data_error(phantom_dir, tmp_path, capsys):
    from boxreg.volume import Volume3
    other = Volume3((10, 10, 10), data=np.zeros(1000, dtype=np.float32))
    path = tmp_path / "small.mha"
    save_volume(other, str(path))
    code = main(["register", "--fixed", str(phantom_dir / "fixed.mhd"),
                 "--moving", str(path), "--out", str(tmp_path / "o")])
    assert code == EXIT_DATA
    assert "dims differ" in capsys.readouterr().err


def test_register_roi_outside_volume_is_usage_error(phantom_dir, tmp_path, capsys):
    code = main(register_args(phantom_dir, tmp_path / "o", "--roi", "4,7,9,12,15,99"))
    assert code == EXIT_USAGE
    assert "out of bounds" in capsys.readouterr().err


def test_register_numeric_failure_exit_code(phantom_dir, tmp_path, monkeypatch, capsys):
    def bad_grad(*args, **kwargs):
        import boxreg.loss
        g = boxreg.loss.loss_grad_dvf(*args, **kwargs)
        return np.full_like(g, np.nan)

    monkeypatch.setattr(boxreg.engine, "loss_grad_dvf", bad_grad)
    code = main(register_args(phantom_dir, tmp_path / "o", "--iso-iters", "2"))
    assert code == EXIT_NUMERIC
    assert "full-image refinement" in capsys.readouterr().err


def test_register_bad_config_json(phantom_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"optimizer": {"learning_rate": -1}}')
    assert main(register_args(phantom_dir, tmp_path / "o",
                              "--config", str(cfg))) == EXIT_DATA


# ------------------------------------------------------------------ compare

def test_compare_report_and_traces(phantom_dir, tmp_path):
    out = tmp_path / "cmp"
    code = main(["compare", "--fixed", str(phantom_dir / "fixed.mhd"),
                 "--moving", str(phantom_dir / "moving.mhd"), "--roi", ROI_FLAG,
                 "--iso-only-iters", "6", "--combo", "3,3", "--out", str(out)])
    assert code == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    m = report["metrics"]
    assert m["iso_only_iters"] == 6
    assert (m["combo_iso_iters"], m["combo_rso_iters"]) == (3, 3)
    assert report["benefit_ratio_undefined"] is False
    iso_rows = (out / "trace_iso.csv").read_text().splitlines()
    combo_rows = (out / "trace_combo.csv").read_text().splitlines()
    assert len(iso_rows) == 1 + 6 and len(combo_rows) == 1 + 6
    assert combo_rows[-1].startswith("6,RSO,")
    # evaluation defaulted to the registration inputs themselves
    assert m["evaluated_against_reference"] is False


def test_compare_with_reference_volumes(phantom_dir, tmp_path):
    out = tmp_path / "cmp_ref"
    code = main(["compare", "--fixed", str(phantom_dir / "fixed.mhd"),
                 "--moving", str(phantom_dir / "moving.mhd"), "--roi", ROI_FLAG,
                 "--iso-only-iters", "2", "--combo", "1,1", "--out", str(out),
                 "--eval-fixed", str(phantom_dir / "fixed_clean.mhd"),
                 "--eval-moving", str(phantom_dir / "moving_clean.mhd")])
    assert code == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["metrics"]["evaluated_against_reference"] is True


def test_compare_identical_inputs_flags_undefined_ratio(phantom_dir, tmp_path):
    out = tmp_path / "same"
    fixed = str(phantom_dir / "fixed.mhd")
    code = main(["compare", "--fixed", fixed, "--moving", fixed, "--roi", ROI_FLAG,
                 "--iso-only-iters", "2", "--combo", "1,1", "--out", str(out)])
    assert code == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["metrics"]["benefit_ratio"] is None
    assert report["benefit_ratio_undefined"] is True
    assert report["metrics"]["roi_rmse_init"] == 0.0


# ----------------------------------------------------------------- diagnose

def test_diagnose_whole_volume_single_block(phantom_dir, tmp_path):
    out = tmp_path / "share.json"
    code = main(["diagnose", "--fixed", str(phantom_dir / "fixed.mhd"),
                 "--moving", str(phantom_dir / "moving.mhd"),
                 "--dvf", str(phantom_dir / "gt_dvf.mhd"),
                 "--blocks", "24,24,24", "--out", str(out)])
    assert code == EXIT_OK
    report = json.loads(out.read_text())
    assert len(report["regions"]) == 1
    assert report["regions"][0]["grad_fraction"] == 1.0
    assert report["blocks"] == [24, 24, 24]


def test_diagnose_block_grid_fractions_sum_to_one(phantom_dir, tmp_path):
    out = tmp_path / "share8.json"
    code = main(["diagnose", "--fixed", str(phantom_dir / "fixed.mhd"),
                 "--moving", str(phantom_dir / "moving.mhd"),
                 "--dvf", str(phantom_dir / "gt_dvf.mhd"),
                 "--blocks", "12,12,12", "--out", str(out)])
    assert code == EXIT_OK
    report = json.loads(out.read_text())
    assert len(report["regions"]) == 8
    assert sum(r["grad_fraction"] for r in report["regions"]) == pytest.approx(1.0)


def test_diagnose_zero_block_is_usage_error(phantom_dir, tmp_path, capsys):
    code = main(["diagnose", "--fixed", str(phantom_dir / "fixed.mhd"),
                 "--moving", str(phantom_dir / "moving.mhd"),
                 "--dvf", str(phantom_dir / "gt_dvf.mhd"),
                 "--blocks", "0,12,12", "--out", str(tmp_path / "x.json")])
    assert code == EXIT_USAGE


# -------------------------------------------------------------------- slice

def test_slice_writes_grayscale_png(phantom_dir, tmp_path):
    out = tmp_path / "z12.png"
    code = main(["slice", "--volume", str(phantom_dir / "fixed.mhd"),
                 "--axis", "z", "--index", "12", "--out", str(out)])
    assert code == EXIT_OK
    img = Image.open(out)
    assert img.mode == "L"
    assert img.size == (24, 24)


def test_slice_axis_orientation_matches_extractor(phantom_dir, tmp_path):
    from boxreg.volume import extract_slice, window_level
    out = tmp_path / "y5.png"
    assert main(["slice", "--volume", str(phantom_dir / "fixed.mhd"),
                 "--axis", "y", "--index", "5", "--out", str(out)]) == EXIT_OK
    vol = load_volume(str(phantom_dir / "fixed.mhd"))
    expected = window_level(extract_slice(vol, "y", 5), -1000.0, 500.0)
    assert np.array_equal(np.asarray(Image.open(out)), expected.pixels)


def test_slice_self_difference_is_mid_gray(phantom_dir, tmp_path):
    out = tmp_path / "diff.png"
    fixed = str(phantom_dir / "fixed.mhd")
    code = main(["slice", "--volume", fixed, "--minus", fixed, "--index", "12",
                 "--window", "-500", "500", "--out", str(out)])
    assert code == EXIT_OK
    px = np.asarray(Image.open(out))
    assert np.all(px == 128)


def test_slice_index_out_of_range_is_usage_error(phantom_dir, tmp_path, capsys):
    code = main(["slice", "--volume", str(phantom_dir / "fixed.mhd"),
                 "--index", "99", "--out", str(tmp_path / "x.png")])
    assert code == EXIT_USAGE
    assert "out of range" in capsys.readouterr().err


def test_slice_missing_volume_is_data_error(tmp_path):
    code = main(["slice", "--volume", str(tmp_path / "none.mhd"),
                 "--index", "0", "--out", str(tmp_path / "x.png")])
    assert code == EXIT_DATA


def test_slice_minus_dim_mismatch_is_data_error(phantom_dir, tmp_path):
    from boxreg.volume import Volume3
    other = Volume3((10, 10, 10), data=np.zeros(1000, dtype=np.float32))
    path = tmp_path / "small.mha"
    save_volume(other, str(path))
    code = main(["slice", "--volume", str(phantom_dir / "fixed.mhd"),
                 "--minus", str(path), "--index", "0",
                 "--out", str(tmp_path / "x.png")])
    assert code == EXIT_DATA


# ------------------------------------------------------------ parser-level

def test_unknown_subcommand_is_usage_error():
    assert main(["frobnicate"]) == EXIT_USAGE


def test_missing_required_flag_is_usage_error():
    assert main(["register", "--fixed", "a.mhd"]) == EXIT_USAGE


def test_malformed_roi_flag_is_usage_error(phantom_dir, tmp_path):
    assert main(register_args(phantom_dir, tmp_path / "o",
                              "--roi", "1,2,3")) == EXIT_USAGE


def test_help_exits_zero(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "boxreg" in capsys.readouterr().out


def test_module_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "boxreg.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "register" in proc.stdout
