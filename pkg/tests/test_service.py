"""Integration tests for the HTTP session service.

All tests run the app in-process via the test client; optimization jobs
still execute on real background threads, so the busy/cancel/polling
behavior exercised here is the same as over a socket.
"""

import json
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

import boxreg.engine
from boxreg.phantom import PhantomSpec, generate
from boxreg.service import _volume_bytes, create_app
from boxreg.transform import load_dvf, warp
from boxreg.volume import load_volume, rmse

SMALL_SPEC = PhantomSpec.from_json_dict({
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
})
ROI = {"min": [4, 7, 9], "max": [12, 15, 17]}
FAST_CONFIG = json.dumps({"loss": {"reg_weight": 0.01},
                          "optimizer": {"learning_rate": 0.05}})


@pytest.fixture(scope="module")
def pair():
    return generate(SMALL_SPEC)


@pytest.fixture(scope="module")
def volume_bytes(pair):
    return {"fixed": _volume_bytes(pair.fixed), "moving": _volume_bytes(pair.moving)}


@pytest.fixture()
def client():
    with TestClient(create_app()) as c:
        yield c


def make_session(client, volume_bytes, config: str | None = FAST_CONFIG) -> str:
    data = {"config": config} if config else {}
    r = client.post("/sessions",
                    files={"fixed": ("fixed.mha", volume_bytes["fixed"]),
                           "moving": ("moving.mha", volume_bytes["moving"])},
                    data=data)
    assert r.status_code == 201, r.text
    return r.json()["id"]


def wait_idle(client, sid, timeout=30.0) -> dict:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        handle = client.get(f"/sessions/{sid}").json()
        if handle["status"]["state"] not in ("running", "cancelling"):
            return handle
        time.sleep(0.01)
    raise AssertionError(f"session {sid} did not become idle within {timeout}s")


# ---------------------------------------------------------------- lifecycle

def test_healthz(client):
    r = client.get("/healthz")
    assert r.status_code == 200
    assert r.json() == {"status": "ok"}


def test_create_and_fetch_session(client, volume_bytes):
    sid = make_session(client, volume_bytes)
    handle = client.get(f"/sessions/{sid}").json()
    assert handle["dims"] == [24, 24, 24]
    assert handle["init"] == "identity"
    assert handle["status"]["state"] == "idle"
    assert handle["stage"] == "initialized"
    assert handle["last_iteration"] == 0    # seed measurement only
    listing = client.get("/sessions").json()["sessions"]
    assert sid in [row["id"] for row in listing]


def test_create_dim_mismatch_names_both_dims(client, volume_bytes, pair):
    from boxreg.volume import Volume3
    other = Volume3((12, 12, 12), data=np.zeros(12 ** 3, dtype=np.float32))
    r = client.post("/sessions",
                    files={"fixed": ("fixed.mha", volume_bytes["fixed"]),
                           "moving": ("moving.mha", _volume_bytes(other))})
    assert r.status_code == 422
    body = r.json()
    assert body["code"] == "dim_mismatch"
    assert "[24, 24, 24]" in body["message"] and "[12, 12, 12]" in body["message"]


def test_create_with_garbage_volume_is_400(client, volume_bytes):
    r = client.post("/sessions",
                    files={"fixed": ("fixed.mha", b"not a volume at all"),
                           "moving": ("moving.mha", volume_bytes["moving"])})
    assert r.status_code == 400
    body = r.json()
    assert body["code"] == "bad_volume"
    assert body["field"] == "fixed"


def test_create_with_missing_part_is_400(client, volume_bytes):
    r = client.post("/sessions",
                    files={"fixed": ("fixed.mha", volume_bytes["fixed"])})
    assert r.status_code == 400
    assert r.json()["code"] == "invalid_request"


def test_create_with_bad_config_is_400(client, volume_bytes):
    r = client.post("/sessions",
                    files={"fixed": ("fixed.mha", volume_bytes["fixed"]),
                           "moving": ("moving.mha", volume_bytes["moving"])},
                    data={"config": "{not json"})
    assert r.status_code == 400
    assert r.json()["code"] == "invalid_config"


def test_upload_over_limit_is_413(volume_bytes):
    with TestClient(create_app(max_upload_bytes=1024)) as small:
        r = small.post("/sessions",
                       files={"fixed": ("fixed.mha", volume_bytes["fixed"]),
                              "moving": ("moving.mha", volume_bytes["moving"])})
    assert r.status_code == 413
    assert r.json()["code"] == "payload_too_large"


def test_unknown_session_is_404(client):
    for path in ("/sessions/nope", "/sessions/nope/trace",
                 "/sessions/nope/slice?index=0", "/sessions/nope/metrics"):
        r = client.get(path)
        assert r.status_code == 404
        assert r.json()["code"] == "not_found"
    assert client.post("/sessions/nope/iso", json={}).status_code == 404


# --------------------------------------------------------------------- jobs

def test_iso_job_runs_to_idle(client, volume_bytes):
    sid = make_session(client, volume_bytes)
    r = client.post(f"/sessions/{sid}/iso", json={"iterations": 5})
    assert r.status_code == 202
    handle = wait_idle(client, sid)
    assert handle["status"]["state"] == "idle"
    assert handle["stage"] == "iso_done"
    assert handle["last_iteration"] == 5
    assert handle["last_run"]["iterations_completed"] == 5


def test_iso_default_budget_is_100(client, volume_bytes):
    sid = make_session(client, volume_bytes)
    assert client.post(f"/sessions/{sid}/iso").status_code == 202
    handle = wait_idle(client, sid)
    assert handle["last_iteration"] == 100


def test_second_start_while_running_is_409(client, volume_bytes):
    sid = make_session(client, volume_bytes)
    assert client.post(f"/sessions/{sid}/iso",
                       json={"iterations": 400}).status_code == 202
    r = client.post(f"/sessions/{sid}/iso", json={"iterations": 1})
    assert r.status_code == 409
    assert r.json()["code"] == "busy"
    r = client.post(f"/sessions/{sid}/rso", json={"roi": ROI, "iterations": 1})
    assert r.status_code == 409
    client.post(f"/sessions/{sid}/cancel")
    wait_idle(client, sid)


def test_rso_records_submitted_box_verbatim(client, volume_bytes):
    sid = make_session(client, volume_bytes)
    r = client.post(f"/sessions/{sid}/rso", json={"roi": ROI, "iterations": 3})
    assert r.status_code == 202
    assert r.json()["roi"] == ROI
    handle = wait_idle(client, sid)
    assert handle["roi_history"] == [ROI]
    rows = client.get(f"/sessions/{sid}/trace", params={"since": 0}).json()["rows"]
    assert [row["phase"] for row in rows] == ["RSO"] * 3
    assert all(row["roi_id"] == 0 for row in rows)


def test_rso_out_of_bounds_names_violated_bound(client, volume_bytes):
    sid = make_session(client, volume_bytes)
    bad = {"min": [4, 7, 9], "max": [12, 15, 80]}
    r = client.post(f"/sessions/{sid}/rso", json={"roi": bad})
    assert r.status_code == 422
    body = r.json()
    assert body["code"] == "invalid_roi"
    assert body["field"] == "roi.max[2]"
    assert "80" in body["message"]


def test_rso_without_roi_is_422(client, volume_bytes):
    sid = make_session(client, volume_bytes)
    r = client.post(f"/sessions/{sid}/rso", json={"iterations": 3})
    assert r.status_code == 422
    assert r.json()["field"] == "roi"


def test_bad_iterations_is_422(client, volume_bytes):
    sid = make_session(client, volume_bytes)
    r = client.post(f"/sessions/{sid}/iso", json={"iterations": -3})
    assert r.status_code == 422
    assert r.json()["field"] == "iterations"


def test_job_failure_is_reported(client, volume_bytes, monkeypatch):
    def bad_grad(*args, **kwargs):
        import boxreg.loss
        return np.full_like(boxreg.loss.loss_grad_dvf(*args, **kwargs), np.nan)

    monkeypatch.setattr(boxreg.engine, "loss_grad_dvf", bad_grad)
    sid = make_session(client, volume_bytes)
    assert client.post(f"/sessions/{sid}/iso", json={"iterations": 3}).status_code == 202
    handle = wait_idle(client, sid)
    assert handle["status"]["state"] == "failed"
    assert "non-finite" in handle["status"]["reason"]


# -------------------------------------------------------------------- trace

def test_trace_since_semantics(client, volume_bytes):
    sid = make_session(client, volume_bytes)
    client.post(f"/sessions/{sid}/iso", json={"iterations": 4})
    wait_idle(client, sid)
    full = client.get(f"/sessions/{sid}/trace", params={"since": -1}).json()["rows"]
    assert [row["iteration"] for row in full] == [0, 1, 2, 3, 4]
    assert full[0]["phase"] == "INIT"
    empty = client.get(f"/sessions/{sid}/trace", params={"since": 4}).json()["rows"]
    assert empty == []
    tail = client.get(f"/sessions/{sid}/trace", params={"since": 2}).json()["rows"]
    assert [row["iteration"] for row in tail] == [3, 4]


def test_polling_during_run_reassembles_every_row(client, volume_bytes):
    """Poll with since= while a 100-iteration job runs; the union of the
    deltas must be exactly iterations 1..100, no gaps, no duplicates."""
    sid = make_session(client, volume_bytes)
    client.post(f"/sessions/{sid}/iso", json={"iterations": 100})
    seen: list[int] = []
    since = 0
    deadline = time.monotonic() + 30
    while time.monotonic() < deadline:
        rows = client.get(f"/sessions/{sid}/trace",
                          params={"since": since}).json()["rows"]
        seen.extend(row["iteration"] for row in rows)
        if rows:
            since = rows[-1]["iteration"]
        state = client.get(f"/sessions/{sid}").json()["status"]["state"]
        if state == "idle" and since >= 100:
            break
        time.sleep(0.005)
    assert seen == list(range(1, 101))


# ------------------------------------------------------------- cancellation

def test_cancel_mid_run_stops_at_whole_iteration(client, volume_bytes):
    sid = make_session(client, volume_bytes)
    client.post(f"/sessions/{sid}/iso", json={"iterations": 400})
    time.sleep(0.15)
    r = client.post(f"/sessions/{sid}/cancel")
    assert r.status_code == 202
    handle = wait_idle(client, sid)
    assert handle["last_run"]["cancelled"] is True
    n = handle["last_iteration"]
    assert 0 <= n < 400
    rows = client.get(f"/sessions/{sid}/trace", params={"since": 0}).json()["rows"]
    assert [row["iteration"] for row in rows] == list(range(1, n + 1))
    # the session is reusable and the stale flag is not left armed
    assert client.post(f"/sessions/{sid}/iso", json={"iterations": 3}).status_code == 202
    handle = wait_idle(client, sid)
    assert handle["last_run"]["cancelled"] is False
    assert handle["last_iteration"] == n + 3


def test_cancel_when_idle_is_a_noop(client, volume_bytes):
    sid = make_session(client, volume_bytes)
    r = client.post(f"/sessions/{sid}/cancel")
    assert r.status_code == 202
    assert r.json()["state"] == "idle"
    client.post(f"/sessions/{sid}/iso", json={"iterations": 3})
    handle = wait_idle(client, sid)
    assert handle["last_iteration"] == 3          # nothing was truncated
    assert handle["last_run"]["cancelled"] is False


# ----------------------------------------------------------------- workflow

def test_accept_freezes_session(client, volume_bytes):
    sid = make_session(client, volume_bytes)
    client.post(f"/sessions/{sid}/iso", json={"iterations": 2})
    wait_idle(client, sid)
    r = client.post(f"/sessions/{sid}/accept")
    assert r.status_code == 200
    assert r.json() == {"state": "accepted", "stage": "accepted"}
    r = client.post(f"/sessions/{sid}/iso", json={})
    assert r.status_code == 409
    assert r.json()["code"] == "frozen"
    # accepting again stays accepted (idempotent)
    assert client.post(f"/sessions/{sid}/accept").status_code == 200


def test_accept_while_running_is_409(client, volume_bytes):
    sid = make_session(client, volume_bytes)
    client.post(f"/sessions/{sid}/iso", json={"iterations": 400})
    r = client.post(f"/sessions/{sid}/accept")
    assert r.status_code == 409
    assert r.json()["code"] == "busy"
    client.post(f"/sessions/{sid}/cancel")
    wait_idle(client, sid)


# ------------------------------------------------------------------- slices

def test_warped_slice_with_zero_field_equals_moving(client, volume_bytes):
    sid = make_session(client, volume_bytes, config=None)
    a = client.get(f"/sessions/{sid}/slice",
                   params={"volume": "warped", "axis": "z", "index": 12})
    b = client.get(f"/sessions/{sid}/slice",
                   params={"volume": "moving", "axis": "z", "index": 12})
    assert a.status_code == b.status_code == 200
    assert a.headers["content-type"] == "image/png"
    assert a.content == b.content


def test_diff_of_identical_volumes_is_mid_gray(client, volume_bytes):
    r = client.post("/sessions",
                    files={"fixed": ("fixed.mha", volume_bytes["fixed"]),
                           "moving": ("moving.mha", volume_bytes["fixed"])})
    sid = r.json()["id"]
    resp = client.get(f"/sessions/{sid}/slice",
                      params={"volume": "diff", "index": 12})
    from PIL import Image
    import io
    px = np.asarray(Image.open(io.BytesIO(resp.content)))
    assert px.shape == (24, 24)
    assert np.all(px == 128)


def test_slice_window_override(client, volume_bytes, pair):
    sid = make_session(client, volume_bytes, config=None)
    resp = client.get(f"/sessions/{sid}/slice",
                      params={"volume": "fixed", "axis": "y", "index": 5,
                              "window": "-200,200"})
    from PIL import Image
    import io
    from boxreg.volume import extract_slice, window_level
    got = np.asarray(Image.open(io.BytesIO(resp.content)))
    want = window_level(extract_slice(pair.fixed, "y", 5), -200.0, 200.0).pixels
    assert np.array_equal(got, want)


def test_slice_bad_params_are_422(client, volume_bytes):
    sid = make_session(client, volume_bytes, config=None)
    cases = [({"volume": "nope", "index": 0}, "volume"),
             ({"volume": "fixed", "index": 99}, "index"),
             ({"volume": "fixed", "axis": "q", "index": 0}, "axis"),
             ({"volume": "fixed", "index": 0, "window": "5,-5"}, "window")]
    for params, field in cases:
        r = client.get(f"/sessions/{sid}/slice", params=params)
        assert r.status_code == 422, params
        assert r.json()["field"] == field


# ------------------------------------------------------- metrics & diagnose

def test_metrics_match_direct_computation(client, volume_bytes, pair, tmp_path):
    sid = make_session(client, volume_bytes)
    client.post(f"/sessions/{sid}/iso", json={"iterations": 5})
    wait_idle(client, sid)
    got = client.get(f"/sessions/{sid}/metrics",
                     params={"roi": "4,7,9,12,15,17"}).json()

    dvf_path = tmp_path / "dvf.mha"
    dvf_path.write_bytes(client.get(f"/sessions/{sid}/dvf").content)
    dvf = load_dvf(str(dvf_path))
    warped = warp(pair.moving, dvf)
    from boxreg.transform import RoiBox
    box = RoiBox((4, 7, 9), (12, 15, 17))
    assert got["full_rmse"] == pytest.approx(rmse(pair.fixed, warped), abs=1e-9)
    assert got["roi_rmse"] == pytest.approx(
        rmse(pair.fixed, warped, mask=box), abs=1e-9)


def test_metrics_bad_roi_is_422(client, volume_bytes):
    sid = make_session(client, volume_bytes)
    r = client.get(f"/sessions/{sid}/metrics", params={"roi": "1,2,3"})
    assert r.status_code == 422


def test_diagnose_whole_volume_block(client, volume_bytes):
    sid = make_session(client, volume_bytes)
    r = client.get(f"/sessions/{sid}/diagnose", params={"blocks": "24,24,24"})
    assert r.status_code == 200
    body = r.json()
    assert len(body["regions"]) == 1
    assert body["regions"][0]["grad_fraction"] == 1.0


def test_diagnose_bad_blocks_is_422(client, volume_bytes):
    sid = make_session(client, volume_bytes)
    assert client.get(f"/sessions/{sid}/diagnose",
                      params={"blocks": "0,2,2"}).status_code == 422
    assert client.get(f"/sessions/{sid}/diagnose",
                      params={"blocks": "abc"}).status_code == 422


# ------------------------------------------------------------------ download

def test_warped_download_round_trips(client, volume_bytes, pair, tmp_path):
    sid = make_session(client, volume_bytes, config=None)
    path = tmp_path / "warped.mha"
    path.write_bytes(client.get(f"/sessions/{sid}/warped").content)
    got = load_volume(str(path))
    # zero field: the warped download equals the moving upload bit-exactly
    assert np.array_equal(got.data, pair.moving.data)


# --------------------------------------------------------------- persistence

def test_restart_restores_sessions_byte_identically(volume_bytes, tmp_path):
    store = str(tmp_path / "store")
    with TestClient(create_app(store_path=store)) as first:
        sid = make_session(first, volume_bytes)
        first.post(f"/sessions/{sid}/iso", json={"iterations": 4})
        wait_idle(first, sid)
        first.post(f"/sessions/{sid}/rso", json={"roi": ROI, "iterations": 3})
        wait_idle(first, sid)
        dvf_before = first.get(f"/sessions/{sid}/dvf").content
        trace_before = first.get(f"/sessions/{sid}/trace").json()
        handle_before = first.get(f"/sessions/{sid}").json()

    with TestClient(create_app(store_path=store)) as second:
        handle = second.get(f"/sessions/{sid}").json()
        assert handle["status"]["state"] == "idle"
        assert handle["stage"] == handle_before["stage"] == "rso_done"
        assert handle["roi_history"] == [ROI]
        assert handle["created_at"] == handle_before["created_at"]
        assert second.get(f"/sessions/{sid}/dvf").content == dvf_before
        assert second.get(f"/sessions/{sid}/trace").json() == trace_before
        # and the restored session still optimizes
        second.post(f"/sessions/{sid}/iso", json={"iterations": 1})
        assert wait_idle(second, sid)["last_iteration"] == 8


def test_restart_preserves_accepted_state(volume_bytes, tmp_path):
    store = str(tmp_path / "store")
    with TestClient(create_app(store_path=store)) as first:
        sid = make_session(first, volume_bytes)
        first.post(f"/sessions/{sid}/accept")

    with TestClient(create_app(store_path=store)) as second:
        handle = second.get(f"/sessions/{sid}").json()
        assert handle["status"]["state"] == "accepted"
        assert handle["stage"] == "accepted"
        r = second.post(f"/sessions/{sid}/iso", json={})
        assert r.status_code == 409


def test_error_bodies_always_have_code_and_message(client, volume_bytes):
    sid = make_session(client, volume_bytes)
    responses = [
        client.get("/sessions/missing"),
        client.post(f"/sessions/{sid}/rso", json={}),
        client.get(f"/sessions/{sid}/slice", params={"volume": "x", "index": 0}),
        client.get("/nonexistent-route"),
    ]
    for r in responses:
        body = r.json()
        assert "code" in body and "message" in body, r.request.url


def test_cross_origin_browser_clients_are_allowed(client):
    r = client.get("/healthz", headers={"Origin": "http://localhost:5173"})
    assert r.status_code == 200
    assert r.headers["access-control-allow-origin"] == "*"
    pre = client.options("/sessions", headers={
        "Origin": "http://localhost:5173",
        "Access-Control-Request-Method": "POST",
    })
    assert pre.status_code == 200
    assert "POST" in pre.headers["access-control-allow-methods"]
