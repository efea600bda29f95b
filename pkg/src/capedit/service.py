"""HTTP job service over the editor.

Submissions are queued and executed by a single pipeline worker thread (one
denoiser job at a time per device); clients poll job status. Jobs, manifests
and images persist on local disk under the runs directory; there is no
database. Rerun requests reuse the cached inversion, so a weight sweep costs
one inversion plus one generation per weight.
"""

from __future__ import annotations

import io
import json
import logging
import queue
import threading
import time
import uuid
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from fastapi import FastAPI, Form, Header, UploadFile
from fastapi.responses import JSONResponse, Response
from PIL import Image

from .direction import WEIGHT_GRID
from .editor import CONDITIONING_MODES, EditConfig, EditRequest, Editor
from .errors import CacheMissError, CapeditError

logger = logging.getLogger(__name__)

STATUS_ORDER = ("queued", "captioning", "inverting", "generating", "done")
DEFAULT_MAX_UPLOAD = 8 * 1024 * 1024  # bytes
DEFAULT_QUEUE_SIZE = 16

_CONFIG_FIELDS = {
    "weight": float, "steps_invert": int, "steps_generate": int,
    "guidance_scale": float, "n_captions": int, "shots": int,
    "before_source": str, "conditioning_mode": str, "template": str,
    "before_caption_override": str, "after_caption_override": str, "seed": int,
}


@dataclass
class EditJob:
    job_id: str
    instruction: str
    created_at: str
    status: str = "queued"
    kind: str = "edit"  # edit | rerun
    image_path: str | None = None
    config: dict = field(default_factory=dict)
    parent_job: str | None = None
    parent_manifest: str | None = None
    rerun_weight: float | None = None
    stage_timings: dict = field(default_factory=dict)
    captions: dict | None = None
    result: dict | None = None
    error: str | None = None

    def advance(self, status: str):
        if self.status == "done":
            raise CapeditError(f"job {self.job_id} already done")
        if status != "failed":
            if STATUS_ORDER.index(status) < STATUS_ORDER.index(self.status):
                raise CapeditError(
                    f"job {self.job_id}: illegal transition "
                    f"{self.status} -> {status}")
        self.status = status


class JobStore:
    """In-memory job table mirrored to disk; multi-reader, single writer."""

    def __init__(self, jobs_dir: Path):
        self.jobs_dir = jobs_dir
        self.jobs_dir.mkdir(parents=True, exist_ok=True)
        self._jobs: dict[str, EditJob] = {}
        self._lock = threading.RLock()

    def put(self, job: EditJob):
        with self._lock:
            self._jobs[job.job_id] = job
            (self.jobs_dir / f"{job.job_id}.json").write_text(
                json.dumps(asdict(job), indent=2))

    def get(self, job_id: str) -> EditJob | None:
        with self._lock:
            return self._jobs.get(job_id)

    def all_jobs(self) -> list[EditJob]:
        with self._lock:
            return list(self._jobs.values())


class PipelineWorker(threading.Thread):
    """Single consumer of the job queue; one pipeline run at a time."""

    def __init__(self, editor: Editor, store: JobStore, job_queue: queue.Queue):
        super().__init__(daemon=True, name="capedit-pipeline-worker")
        self.editor = editor
        self.store = store
        self.queue = job_queue
        self._stop = threading.Event()

    def stop(self):
        self._stop.set()

    def run(self):
        while not self._stop.is_set():
            try:
                job = self.queue.get(timeout=0.1)
            except queue.Empty:
                continue
            try:
                self._process(job)
            except Exception as exc:
                logger.exception("job %s failed", job.job_id)
                job.error = f"{type(exc).__name__}: {exc}"
                job.advance("failed")
                self.store.put(job)
            finally:
                self.queue.task_done()

    def _process(self, job: EditJob):
        stage_started = {"value": time.perf_counter()}

        def on_stage(stage: str):
            now = time.perf_counter()
            if job.status in ("captioning", "inverting", "generating"):
                job.stage_timings[f"{job.status}_s"] = now - stage_started["value"]
            stage_started["value"] = now
            job.advance(stage)
            self.store.put(job)

        if job.kind == "edit":
            cfg = EditConfig(**job.config)
            result = self.editor.edit(
                EditRequest(image=job.image_path, instruction=job.instruction,
                            config=cfg),
                on_stage=on_stage)
        else:
            result = self.editor.rerun_with_weight(
                job.parent_manifest, job.rerun_weight, on_stage=on_stage)
        job.stage_timings[f"{job.status}_s"] = time.perf_counter() - stage_started["value"]
        job.captions = {"before": list(result.caption_pair.before),
                        "after": list(result.caption_pair.after)}
        manifest = json.loads(result.manifest_path.read_text())
        job.result = {
            "image_id": result.image_id,
            "image_url": f"/images/{result.image_id}",
            "manifest_id": result.manifest_id,
            "weight": manifest["direction"]["weight"],
            "direction_norm": result.direction_norm,
        }
        job.advance("done")
        self.store.put(job)


def job_view(job: EditJob) -> dict:
    view = {
        "job_id": job.job_id,
        "status": job.status,
        "kind": job.kind,
        "created_at": job.created_at,
        "stage_timings": job.stage_timings,
        "captions": job.captions,
        "result": job.result,
        "error": job.error,
        "parent_job": job.parent_job,
    }
    if job.kind == "rerun":
        view["skipped_stages"] = ["captioning", "inverting"]
    return view


def create_app(editor: Editor, queue_size: int = DEFAULT_QUEUE_SIZE,
               max_upload_bytes: int = DEFAULT_MAX_UPLOAD,
               start_worker: bool = True) -> FastAPI:
    app = FastAPI(title="capedit service")
    store = JobStore(editor.runs_dir / "jobs")
    job_queue: queue.Queue = queue.Queue(maxsize=queue_size)
    uploads_dir = editor.runs_dir / "uploads"
    uploads_dir.mkdir(parents=True, exist_ok=True)
    worker = PipelineWorker(editor, store, job_queue)
    if start_worker:
        worker.start()
    idempotency: dict[str, str] = {}
    rerun_index: dict[tuple[str, float], str] = {}
    lock = threading.Lock()

    app.state.store = store
    app.state.worker = worker
    app.state.editor = editor

    def _error(status_code: int, message: str, **extra):
        return JSONResponse(status_code=status_code,
                            content={"error": message, **extra})

    @app.get("/health")
    def health():
        return {"status": "ok", "queue_depth": job_queue.qsize(),
                "profile": editor.adapters.profile}

    @app.get("/config")
    def config():
        defaults = EditConfig()
        return {
            "profile": editor.adapters.profile,
            "weight_grid": list(WEIGHT_GRID),
            "weight_min": WEIGHT_GRID[0],
            "weight_max": WEIGHT_GRID[-1],
            "steps_invert": defaults.steps_invert,
            "steps_generate": defaults.steps_generate,
            "guidance_scale": defaults.guidance_scale,
            "conditioning_modes": list(CONDITIONING_MODES),
            "max_upload_bytes": max_upload_bytes,
        }

    @app.post("/edits", status_code=202)
    async def submit(image: UploadFile, instruction: str = Form(""),
                     overrides: str = Form("{}"),
                     idempotency_key: str | None = Header(default=None)):
        if not instruction.strip():
            return _error(422, "instruction must be non-empty", field="instruction")
        raw = await image.read()
        if len(raw) > max_upload_bytes:
            return _error(413, f"image exceeds {max_upload_bytes} bytes")
        try:
            with Image.open(io.BytesIO(raw)) as img:
                img.verify()
        except Exception:
            return _error(400, "image is not decodable", field="image")
        try:
            override_map = json.loads(overrides) if overrides else {}
        except json.JSONDecodeError:
            return _error(422, "overrides must be a JSON object", field="overrides")
        config = {}
        for key, value in override_map.items():
            caster = _CONFIG_FIELDS.get(key)
            if caster is None:
                return _error(422, f"unknown override {key!r}", field="overrides")
            if value is not None:
                config[key] = caster(value)

        with lock:
            if idempotency_key and idempotency_key in idempotency:
                job_id = idempotency[idempotency_key]
                return {"job_id": job_id, "status_url": f"/edits/{job_id}",
                        "deduplicated": True}
            job_id = uuid.uuid4().hex[:12]
            image_path = uploads_dir / f"{job_id}.png"
            with Image.open(io.BytesIO(raw)) as img:
                img.convert("RGB").save(image_path, format="PNG")
            job = EditJob(job_id=job_id, instruction=instruction,
                          created_at=datetime.now(timezone.utc).isoformat(),
                          image_path=str(image_path), config=config)
            try:
                job_queue.put_nowait(job)
            except queue.Full:
                return JSONResponse(status_code=429,
                                    content={"error": "queue full; retry later"},
                                    headers={"Retry-After": "5"})
            store.put(job)
            if idempotency_key:
                idempotency[idempotency_key] = job_id
        return {"job_id": job_id, "status_url": f"/edits/{job_id}"}

    @app.get("/edits/{job_id}")
    def status(job_id: str):
        job = store.get(job_id)
        if job is None:
            return _error(404, f"unknown job {job_id!r}")
        return job_view(job)

    @app.post("/edits/{job_id}/rerun", status_code=202)
    async def rerun(job_id: str, payload: dict):
        weight = payload.get("weight")
        if not isinstance(weight, (int, float)) or weight <= 0:
            return _error(422, "weight must be a positive number", field="weight")
        weight = float(weight)
        parent = store.get(job_id)
        if parent is None:
            return _error(404, f"unknown job {job_id!r}")
        if parent.status != "done":
            return _error(409, f"job {job_id} is {parent.status}; rerun needs a "
                          "completed job")
        manifest_id = parent.result["manifest_id"]
        if parent.kind == "rerun" and parent.parent_manifest:
            manifest_id = parent.parent_manifest
        try:
            self_check = editor.load_manifest(manifest_id)
        except CacheMissError:
            return _error(409, "cached inversion is gone; submit a full edit",
                          remediation="POST /edits")
        if self_check["config"]["conditioning_mode"] != "full":
            return _error(409, "weight reruns only apply to full-mode edits")

        with lock:
            existing = rerun_index.get((manifest_id, weight))
            if existing:
                return {"job_id": existing, "status_url": f"/edits/{existing}",
                        "deduplicated": True}
            if (abs(weight - self_check["direction"]["weight"]) < 1e-12
                    and parent.kind == "edit"):
                # Same weight as the cached edit: serve the existing result.
                return {"job_id": parent.job_id,
                        "status_url": f"/edits/{parent.job_id}",
                        "deduplicated": True}
            new_id = uuid.uuid4().hex[:12]
            job = EditJob(job_id=new_id, instruction=parent.instruction,
                          created_at=datetime.now(timezone.utc).isoformat(),
                          kind="rerun", parent_job=parent.job_id,
                          parent_manifest=manifest_id, rerun_weight=weight)
            try:
                job_queue.put_nowait(job)
            except queue.Full:
                return JSONResponse(status_code=429,
                                    content={"error": "queue full; retry later"},
                                    headers={"Retry-After": "5"})
            store.put(job)
            rerun_index[(manifest_id, weight)] = new_id
        return {"job_id": new_id, "status_url": f"/edits/{new_id}"}

    @app.get("/images/{image_id}")
    def fetch_image(image_id: str):
        path = editor.images_dir / f"{image_id}.png"
        if not path.exists() or not path.is_file():
            return _error(404, f"unknown image {image_id!r}")
        return Response(content=path.read_bytes(), media_type="image/png",
                        headers={"Cache-Control":
                                 "public, max-age=31536000, immutable"})

    @app.get("/cache/stats")
    def cache_stats():
        return editor.cache_stats()

    return app
