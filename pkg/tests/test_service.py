import io
import json
import time
import zipfile

import pytest
from fastapi.testclient import TestClient

from exedit import imaging
from exedit.pipeline import StubEngine
from exedit.service import create_app

from .conftest import natural_image, tinted


class SlowStub(StubEngine):
    """Stub engine with a per-stage delay so queue behavior is observable."""

    def __init__(self, delay: float = 0.15):
        super().__init__()
        self.delay = delay
        self.started: list[str] = []

    def edit(self, triplet, opts, on_stage=None):
        self.started.append(triplet.id)

        def slow_stage(name):
            time.sleep(self.delay)
            if on_stage:
                on_stage(name)

        return super().edit(triplet, opts, on_stage=slow_stage)


def _png(name: str) -> tuple:
    img = natural_image(name)
    return (f"{name}.png", io.BytesIO(imaging.png_bytes(img)), "image/png")


def _files():
    return {
        "x": _png("chelsea"),
        "x_edit": ("xe.png", io.BytesIO(imaging.png_bytes(tinted(natural_image("chelsea"), (0.2, 0, -0.1)))), "image/png"),
        "y": _png("coffee"),
    }


def _wait_done(client, job_id, timeout=30.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        state = client.get(f"/jobs/{job_id}").json()["state"]
        if state in ("done", "failed", "cancelled"):
            return state
        time.sleep(0.05)
    raise TimeoutError(f"job {job_id} still running")


@pytest.fixture()
def client(tmp_path):
    app = create_app(engine=StubEngine(), work_root=tmp_path / "jobs", queue_cap=4)
    with TestClient(app) as c:
        yield c
    app.state.manager.shutdown()


class TestHealth:
    def test_health_reports_backbone(self, client):
        body = client.get("/health").json()
        assert body["status"] == "ok"
        assert body["backbone_loaded"] is False  # stub mode


class TestSubmit:
    def test_valid_submission_is_queued_then_done(self, client):
        resp = client.post("/jobs", files=_files(), data={"options": json.dumps({"lambda": 0.65})})
        assert resp.status_code == 200
        job_id = resp.json()["id"]
        body = client.get(f"/jobs/{job_id}").json()
        assert body["state"] in ("queued", "captioning", "inverting", "capturing", "generating", "done")
        assert _wait_done(client, job_id) == "done"

    def test_lambda_nan_rejected_nothing_enqueued(self, client):
        resp = client.post("/jobs", files=_files(), data={"options": json.dumps({"lambda": float("nan")})})
        assert resp.status_code == 422

    def test_nonpositive_steps_rejected(self, client):
        resp = client.post("/jobs", files=_files(), data={"options": json.dumps({"gen_steps": 0})})
        assert resp.status_code == 422

    def test_undecodable_image_rejected(self, client):
        files = _files()
        files["y"] = ("y.png", io.BytesIO(b"not a png"), "image/png")
        resp = client.post("/jobs", files=files, data={"options": "{}"})
        assert resp.status_code == 422

    def test_queue_cap_gives_retry_after(self, tmp_path):
        app = create_app(engine=SlowStub(delay=0.3), work_root=tmp_path / "jobs", queue_cap=1)
        with TestClient(app) as c:
            codes = [
                c.post("/jobs", files=_files(), data={"options": "{}"}).status_code for _ in range(4)
            ]
        app.state.manager.shutdown()
        assert 429 in codes
        over = [i for i, code in enumerate(codes) if code == 429]
        assert all(codes[i] == 200 for i in range(over[0]))


class TestStatusAndResult:
    def test_unknown_id_404(self, client):
        assert client.get("/jobs/doesnotexist").status_code == 404
        assert client.get("/jobs/doesnotexist/result").status_code == 404
        assert client.post("/jobs/doesnotexist/cancel").status_code == 404

    def test_result_before_done_conflicts(self, tmp_path):
        app = create_app(engine=SlowStub(delay=0.4), work_root=tmp_path / "jobs")
        with TestClient(app) as c:
            job_id = c.post("/jobs", files=_files(), data={"options": "{}"}).json()["id"]
            resp = c.get(f"/jobs/{job_id}/result")
            assert resp.status_code == 409
            _wait_done(c, job_id)
        app.state.manager.shutdown()

    def test_result_bundle_zip(self, client):
        job_id = client.post("/jobs", files=_files(), data={"options": "{}"}).json()["id"]
        _wait_done(client, job_id)
        resp = client.get(f"/jobs/{job_id}/result")
        assert resp.status_code == 200
        zf = zipfile.ZipFile(io.BytesIO(resp.content))
        names = set(zf.namelist())
        assert {"result.png", "provenance.json", "caption.txt", "timings.json"} <= names

    def test_done_job_has_full_progress(self, client):
        job_id = client.post("/jobs", files=_files(), data={"options": "{}"}).json()["id"]
        _wait_done(client, job_id)
        body = client.get(f"/jobs/{job_id}").json()
        assert body["stage_progress"].get("generating") == 1.0


class TestFifo:
    def test_two_jobs_execute_in_submission_order(self, tmp_path):
        engine = SlowStub(delay=0.1)
        app = create_app(engine=engine, work_root=tmp_path / "jobs")
        with TestClient(app) as c:
            first = c.post("/jobs", files=_files(), data={"options": "{}"}).json()["id"]
            second = c.post("/jobs", files=_files(), data={"options": "{}"}).json()["id"]
            _wait_done(c, first)
            _wait_done(c, second)
        app.state.manager.shutdown()
        assert engine.started == [first, second]


class TestCancel:
    def test_cancel_queued_job_never_runs(self, tmp_path):
        engine = SlowStub(delay=0.3)
        app = create_app(engine=engine, work_root=tmp_path / "jobs")
        with TestClient(app) as c:
            running = c.post("/jobs", files=_files(), data={"options": "{}"}).json()["id"]
            queued = c.post("/jobs", files=_files(), data={"options": "{}"}).json()["id"]
            resp = c.post(f"/jobs/{queued}/cancel")
            assert resp.json()["state"] == "cancelled"
            _wait_done(c, running)
            time.sleep(0.3)
            assert c.get(f"/jobs/{queued}").json()["state"] == "cancelled"
        app.state.manager.shutdown()
        assert queued not in engine.started

    def test_cancel_running_job_stops_at_stage_boundary(self, tmp_path):
        engine = SlowStub(delay=0.25)
        app = create_app(engine=engine, work_root=tmp_path / "jobs")
        with TestClient(app) as c:
            job_id = c.post("/jobs", files=_files(), data={"options": "{}"}).json()["id"]
            deadline = time.time() + 5
            while time.time() < deadline:
                if c.get(f"/jobs/{job_id}").json()["state"] != "queued":
                    break
                time.sleep(0.02)
            c.post(f"/jobs/{job_id}/cancel")
            state = _wait_done(c, job_id)
        app.state.manager.shutdown()
        assert state == "cancelled"


class TestSweep:
    def test_sweep_bundle_contains_all_weights_and_shared_caption(self, client):
        options = {"lambdas": [0.0, 0.6, 0.7, 0.8]}
        job_id = client.post("/jobs", files=_files(), data={"options": json.dumps(options)}).json()["id"]
        assert _wait_done(client, job_id) == "done"
        resp = client.get(f"/jobs/{job_id}/result")
        zf = zipfile.ZipFile(io.BytesIO(resp.content))
        names = set(zf.namelist())
        images = [n for n in names if n.startswith("result_lambda_")]
        assert len(images) == 4
        assert "caption.txt" in names

    def test_empty_sweep_rejected(self, client):
        resp = client.post("/jobs", files=_files(), data={"options": json.dumps({"lambdas": []})})
        assert resp.status_code == 422
