"""Job-oriented HTTP facade over the edit engine.

Jobs run minutes, so the API is plain polling: POST /jobs enqueues (FIFO),
GET /jobs/{id} reports the state machine, GET /jobs/{id}/result streams the
bundle as a zip once done. A single worker thread owns the backbone, so at
most one job is ever in a generation stage. Cancellation takes effect at the
next stage boundary.
"""
from __future__ import annotations

import io
import json
import logging
import math
import shutil
import threading
import time
import uuid
import zipfile
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, File, Form, HTTPException, UploadFile
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles

from . import imaging
from .pipeline import EditOptions, ExemplarTriplet, build_engine, save_sweep_bundle

logger = logging.getLogger(__name__)

JOB_STATES = ("queued", "captioning", "inverting", "capturing", "generating", "done", "failed", "cancelled")
_STATE_ORDER = {s: i for i, s in enumerate(JOB_STATES)}
_STAGE_TO_STATE = {
    "caption": "captioning",
    "embed": "captioning",
    "invert": "inverting",
    "capture": "capturing",
    "generate": "generating",
    "decode": "generating",
}


class JobCancelled(Exception):
    pass


@dataclass
class Job:
    id: str
    state: str = "queued"
    options: dict = field(default_factory=dict)
    lambdas: list[float] | None = None
    stage_progress: dict = field(default_factory=dict)
    error: str | None = None
    result_dir: Path | None = None
    created_at: float = field(default_factory=time.time)
    finished_at: float | None = None
    cancel_requested: bool = False
    work_dir: Path | None = None

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "state": self.state,
            "options": self.options,
            "lambdas": self.lambdas,
            "stage_progress": self.stage_progress,
            "error": self.error,
            "created_at": self.created_at,
            "finished_at": self.finished_at,
        }


class JobManager:
    """FIFO queue + single worker loop owning the engine."""

    def __init__(self, engine, work_root: Path, queue_cap: int = 16, result_ttl: float = 24 * 3600.0):
        self.engine = engine
        self.work_root = Path(work_root)
        self.work_root.mkdir(parents=True, exist_ok=True)
        self.queue_cap = queue_cap
        self.result_ttl = result_ttl
        self.jobs: dict[str, Job] = {}
        self.queue: deque[str] = deque()
        self.lock = threading.Lock()
        self.wakeup = threading.Condition(self.lock)
        self._stop = False
        self.worker = threading.Thread(target=self._worker_loop, daemon=True)
        self.worker.start()

    # -- submission -----------------------------------------------------------

    def submit(self, images: dict[str, bytes], options: dict) -> Job:
        opts_dict = dict(options)
        lambdas = opts_dict.pop("lambdas", None)
        lam = opts_dict.get("lambda", 0.65)
        if not isinstance(lam, (int, float)) or not math.isfinite(float(lam)):
            raise ValueError("lambda must be a finite number")
        if lambdas is not None:
            if not isinstance(lambdas, list) or not lambdas:
                raise ValueError("lambdas must be a non-empty list")
            for v in lambdas:
                if not isinstance(v, (int, float)) or not math.isfinite(float(v)):
                    raise ValueError("every sweep weight must be a finite number")
        for key in ("gen_steps", "inversion_steps"):
            if key in opts_dict and int(opts_dict[key]) <= 0:
                raise ValueError(f"{key} must be positive")
        opts = EditOptions.from_dict(opts_dict)  # validates the rest
        job_id = uuid.uuid4().hex[:12]
        work_dir = self.work_root / job_id
        work_dir.mkdir(parents=True)
        for name, data in images.items():
            try:
                img = imaging.from_png_bytes(data)
            except Exception as exc:
                shutil.rmtree(work_dir, ignore_errors=True)
                raise ValueError(f"image {name!r} is not decodable: {exc}") from exc
            imaging.to_work_size(img).save(work_dir / f"{name}.png")
        job = Job(id=job_id, options=opts.to_dict(), lambdas=lambdas, work_dir=work_dir)
        with self.lock:
            if len(self.queue) >= self.queue_cap:
                shutil.rmtree(work_dir, ignore_errors=True)
                raise OverflowError("job queue is full, retry later")
            self.jobs[job_id] = job
            self.queue.append(job_id)
            self.wakeup.notify()
        self._purge_old()
        return job

    def get(self, job_id: str) -> Job:
        with self.lock:
            job = self.jobs.get(job_id)
        if job is None:
            raise KeyError(job_id)
        return job

    def cancel(self, job_id: str) -> Job:
        job = self.get(job_id)
        with self.lock:
            if job.state == "queued":
                if job_id in self.queue:
                    self.queue.remove(job_id)
                self._finish(job, "cancelled")
            elif job.state not in ("done", "failed", "cancelled"):
                job.cancel_requested = True
        return job

    # -- worker ----------------------------------------------------------------

    def _set_state(self, job: Job, state: str) -> None:
        with self.lock:
            if _STATE_ORDER[state] < _STATE_ORDER[job.state]:
                raise RuntimeError(f"state regression {job.state} -> {state}")
            if job.state != state and job.state in ("done", "failed", "cancelled"):
                raise RuntimeError("job already terminal")
            for prev in JOB_STATES[1:_STATE_ORDER[state]]:
                job.stage_progress.setdefault(prev, 1.0)
            if state not in ("done", "failed", "cancelled"):
                job.stage_progress.setdefault(state, 0.0)
            job.state = state

    def _finish(self, job: Job, state: str, error: str | None = None) -> None:
        job.state = state
        job.error = error
        job.finished_at = time.time()
        if state == "done":
            for s in JOB_STATES[1:-3]:
                job.stage_progress[s] = 1.0

    def _on_stage(self, job: Job):
        def callback(stage: str) -> None:
            if job.cancel_requested:
                raise JobCancelled()
            state = _STAGE_TO_STATE.get(stage)
            if state and _STATE_ORDER[state] >= _STATE_ORDER[job.state]:
                self._set_state(job, state)

        return callback

    def _worker_loop(self) -> None:
        while True:
            with self.lock:
                while not self.queue and not self._stop:
                    self.wakeup.wait(timeout=0.5)
                if self._stop:
                    return
                job_id = self.queue.popleft()
                job = self.jobs[job_id]
            try:
                self._run_job(job)
            except JobCancelled:
                self._finish(job, "cancelled")
            except Exception as exc:
                logger.exception("job %s failed", job.id)
                self._finish(job, "failed", error=str(exc))

    def _run_job(self, job: Job) -> None:
        if job.cancel_requested:
            raise JobCancelled()
        triplet = ExemplarTriplet.from_paths(
            x=job.work_dir / "x.png",
            x_edit=job.work_dir / "x_edit.png",
            y=job.work_dir / "y.png",
            id=job.id,
        )
        opts = EditOptions.from_dict(job.options)
        out_dir = job.work_dir / "result"
        on_stage = self._on_stage(job)
        if job.lambdas:
            results = self.engine.lambda_sweep(triplet, [float(v) for v in job.lambdas], opts, on_stage=on_stage)
            save_sweep_bundle(results, out_dir)
        else:
            result = self.engine.edit(triplet, opts, on_stage=on_stage)
            result.save_bundle(out_dir)
        job.result_dir = out_dir
        self._finish(job, "done")

    def _purge_old(self) -> None:
        cutoff = time.time() - self.result_ttl
        with self.lock:
            stale = [
                j
                for j in self.jobs.values()
                if j.finished_at and j.finished_at < cutoff and j.work_dir is not None
            ]
        for job in stale:
            shutil.rmtree(job.work_dir, ignore_errors=True)
            with self.lock:
                self.jobs.pop(job.id, None)

    def shutdown(self) -> None:
        with self.lock:
            self._stop = True
            self.wakeup.notify_all()
        self.worker.join(timeout=5)


def zip_bundle(result_dir: Path) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        for path in sorted(result_dir.rglob("*")):
            if path.is_file():
                zf.write(path, path.relative_to(result_dir))
    return buf.getvalue()


def create_app(
    engine=None,
    work_root: str | Path = "jobs",
    queue_cap: int = 16,
    stub: bool = False,
    weights_dir: str | Path | None = None,
    cache_dir: str | Path | None = None,
    frontend_dist: str | Path | None = None,
    result_ttl: float = 24 * 3600.0,
) -> FastAPI:
    if engine is None:
        engine = build_engine(stub=stub, weights_dir=weights_dir, cache_dir=cache_dir)
    manager = JobManager(engine, Path(work_root), queue_cap=queue_cap, result_ttl=result_ttl)
    app = FastAPI(title="exedit job service")
    app.state.manager = manager

    @app.get("/health")
    def health():
        return {"status": "ok", "backbone_loaded": engine.backbone_id != "stub", "backbone_id": engine.backbone_id}

    @app.post("/jobs")
    async def submit(
        x: UploadFile = File(...),
        x_edit: UploadFile = File(...),
        y: UploadFile = File(...),
        options: str = Form("{}"),
    ):
        try:
            opts = json.loads(options) if options else {}
            if not isinstance(opts, dict):
                raise ValueError("options must be a JSON object")
            images = {"x": await x.read(), "x_edit": await x_edit.read(), "y": await y.read()}
            job = manager.submit(images, opts)
        except (ValueError, json.JSONDecodeError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        except OverflowError as exc:
            return JSONResponse(status_code=429, content={"detail": str(exc)}, headers={"Retry-After": "30"})
        return {"id": job.id}

    @app.get("/jobs/{job_id}")
    def status(job_id: str):
        try:
            return manager.get(job_id).to_json()
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown job id")

    @app.post("/jobs/{job_id}/cancel")
    def cancel(job_id: str):
        try:
            job = manager.cancel(job_id)
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown job id")
        return {"id": job.id, "state": job.state, "cancel_requested": job.cancel_requested}

    @app.get("/jobs/{job_id}/result")
    def result(job_id: str):
        try:
            job = manager.get(job_id)
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown job id")
        if job.state != "done" or job.result_dir is None:
            raise HTTPException(status_code=409, detail=f"job is {job.state}, result not available")
        data = zip_bundle(job.result_dir)
        return Response(
            content=data,
            media_type="application/zip",
            headers={"Content-Disposition": f'attachment; filename="{job_id}.zip"'},
        )

    if frontend_dist and Path(frontend_dist).is_dir():
        app.mount("/", StaticFiles(directory=str(frontend_dist), html=True), name="ui")

    return app
