"""HTTP generation service: job-queue endpoints over the sampling library.

Jobs move queued -> running -> (done | failed) and terminal states are
immutable. Sampling runs on a small worker pool against read-only weights;
results are base64 PNGs plus request metadata. The RNG stream for a job is
derived from (seed, request payload), so identical requests give
byte-identical images while distinct requests get independent streams.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from ..guidance import GuidanceStrategy
from ..models import tokenize
from ..sampler import ancestral_sample, inpaint_finetuned, inpaint_replacement, respaced, sdedit
from .images import b64_png, mask_to_png_bytes, png_b64, png_bytes_to_mask
from .ops import parse_steps
import base64


class GuidanceSpec(BaseModel):
    kind: str = "none"  # none | classifier_free | clip
    scale: float = 1.0


class GenerateRequest(BaseModel):
    prompt: str = ""
    guidance: GuidanceSpec = Field(default_factory=GuidanceSpec)
    steps: Optional[str] = None  # None/full | "100" | "seg:a,b,..."
    seed: int = 0
    count: int = Field(default=1, ge=1, le=16)
    model: str = "base"


class InpaintRequest(BaseModel):
    image: str  # base64 PNG
    mask: str   # base64 PNG, white = keep
    prompt: str = ""
    guidance: GuidanceSpec = Field(default_factory=GuidanceSpec)
    steps: Optional[str] = None
    seed: int = 0
    mode: str = "replacement"  # replacement | finetuned
    model: Optional[str] = None


class SdeditRequest(BaseModel):
    image: str
    t_start: int
    prompt: str = ""
    guidance: GuidanceSpec = Field(default_factory=GuidanceSpec)
    steps: Optional[str] = None
    seed: int = 0
    model: str = "base"


class UpsampleRequest(BaseModel):
    image: str  # low-res base64 PNG
    prompt: str = ""
    steps: Optional[str] = None
    seed: int = 0
    model: str = "upsampler"


class EchoRequest(BaseModel):
    mask: str


@dataclass
class ApiJob:
    id: str
    kind: str
    payload: dict
    state: str = "queued"
    result: Optional[dict] = None
    error: Optional[str] = None

    def view(self):
        out = {"id": self.id, "kind": self.kind, "state": self.state}
        if self.result is not None:
            out["result"] = self.result
        if self.error is not None:
            out["error"] = self.error
        return out


@dataclass
class ModelEntry:
    model: object
    schedule: object
    arch: str
    info: dict = field(default_factory=dict)


class Registry:
    def __init__(self):
        self.entries = {}

    def add(self, name, model, schedule, arch, **info):
        self.entries[name] = ModelEntry(model, schedule, arch, info)

    def get(self, name):
        return self.entries.get(name)

    def listing(self):
        return [{"name": n, "arch": e.arch, **e.info}
                for n, e in sorted(self.entries.items())]


def _job_rng(seed, kind, payload):
    canon = json.dumps({"kind": kind, **payload}, sort_keys=True).encode()
    digest = int.from_bytes(hashlib.sha256(canon).digest()[:8], "big")
    return np.random.default_rng([seed, digest])


def create_app(registry, queue_size=16, concurrency=2):
    app = FastAPI(title="sprite diffusion service")
    app.state.registry = registry
    app.state.jobs = {}
    app.state.lock = threading.Lock()
    app.state.training_lock = threading.Lock()
    app.state.pending = 0
    app.state.queue_size = queue_size
    app.state.pool = ThreadPoolExecutor(max_workers=concurrency)
    app.state.counter = itertools.count()

    @app.exception_handler(RequestValidationError)
    async def malformed(request: Request, exc):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    def error(code, detail):
        return JSONResponse(status_code=code, content={"detail": detail})

    def strategy_for(spec, model_name):
        if spec.kind == "none":
            return GuidanceStrategy()
        if spec.kind in ("classifier_free", "cfg"):
            return GuidanceStrategy(kind="classifier_free", scale=spec.scale)
        if spec.kind == "clip":
            entry = registry.get("clip")
            if entry is None:
                raise KeyError("no contrastive model registered for clip guidance")
            return GuidanceStrategy(kind="clip", scale=spec.scale,
                                    embedding_model=entry.model,
                                    allow_unnoised_clip=not entry.model.noised)
        raise ValueError(f"unknown guidance kind {spec.kind!r}")

    def submit(kind, payload_model, runner):
        if app.state.training_lock.locked():
            return error(409, "training holds the model lock")
        with app.state.lock:
            if app.state.pending >= app.state.queue_size:
                return error(503, "job queue is full")
            app.state.pending += 1
            job = ApiJob(f"job-{next(app.state.counter):08d}", kind,
                         payload_model.model_dump())
            app.state.jobs[job.id] = job

        def run():
            job.state = "running"
            try:
                job.result = runner()
                job.state = "done"
            except Exception as exc:  # surfaced via the job record
                job.error = f"{type(exc).__name__}: {exc}"
                job.state = "failed"
            finally:
                with app.state.lock:
                    app.state.pending -= 1

        app.state.pool.submit(run)
        return JSONResponse({"job_id": job.id}, status_code=202)

    def metadata(req, model_name, images):
        return {
            "images": [png_b64(img) for img in images],
            "metadata": {"seed": req.seed, "scale": req.guidance.scale
                         if hasattr(req, "guidance") else None,
                         "steps": req.steps, "model": model_name},
        }

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.get("/v1/models")
    def models():
        return {"models": registry.listing()}

    @app.get("/v1/jobs/{job_id}")
    def job_view(job_id: str):
        job = app.state.jobs.get(job_id)
        if job is None:
            return error(404, f"unknown job {job_id}")
        return job.view()

    @app.post("/v1/generate")
    def generate(req: GenerateRequest):
        entry = registry.get(req.model)
        if entry is None or entry.arch != "denoiser":
            return error(404, f"unknown model {req.model!r}")
        try:
            strategy = strategy_for(req.guidance, req.model)
        except (ValueError, KeyError) as exc:
            return error(400, str(exc))

        def run():
            sched = respaced(entry.schedule, parse_steps(req.steps))
            cfg = entry.model.config
            tokens = [tokenize(req.prompt)] * req.count
            x = ancestral_sample(entry.model, strategy, sched,
                                 (req.count, cfg.channels, cfg.image_size, cfg.image_size),
                                 tokens, _job_rng(req.seed, "generate", req.model_dump()),
                                 dtype=np.float32)
            return metadata(req, req.model, x)

        return submit("generate", req, run)

    @app.post("/v1/inpaint")
    def inpaint(req: InpaintRequest):
        name = req.model or ("inpaint" if req.mode == "finetuned" else "base")
        entry = registry.get(name)
        if entry is None or entry.arch != "denoiser":
            return error(404, f"unknown model {name!r}")
        try:
            strategy = strategy_for(req.guidance, name)
            image = b64_png(req.image)[None]
            mask = png_bytes_to_mask(base64.b64decode(req.mask))[None, None]
        except (ValueError, KeyError) as exc:
            return error(400, f"malformed request: {exc}")

        def run():
            sched = respaced(entry.schedule, parse_steps(req.steps))
            tokens = [tokenize(req.prompt)]
            rng = _job_rng(req.seed, "inpaint", req.model_dump())
            if req.mode == "finetuned":
                x = inpaint_finetuned(entry.model, strategy, sched, image, mask,
                                      tokens, rng)
            else:
                x = inpaint_replacement(entry.model, strategy, sched, image,
                                        np.broadcast_to(mask[:, 0:1], image.shape),
                                        tokens, rng, dtype=np.float32)
            return metadata(req, name, x)

        return submit("inpaint", req, run)

    @app.post("/v1/sdedit")
    def sdedit_endpoint(req: SdeditRequest):
        entry = registry.get(req.model)
        if entry is None or entry.arch != "denoiser":
            return error(404, f"unknown model {req.model!r}")
        try:
            strategy = strategy_for(req.guidance, req.model)
            image = b64_png(req.image)[None]
        except (ValueError, KeyError) as exc:
            return error(400, f"malformed request: {exc}")

        def run():
            sched = respaced(entry.schedule, parse_steps(req.steps))
            x = sdedit(entry.model, strategy, sched, image, req.t_start,
                       [tokenize(req.prompt)],
                       _job_rng(req.seed, "sdedit", req.model_dump()))
            return metadata(req, req.model, x)

        return submit("sdedit", req, run)

    @app.post("/v1/upsample")
    def upsample(req: UpsampleRequest):
        entry = registry.get(req.model)
        if entry is None or entry.arch != "denoiser" \
                or entry.model.config.variant != "upsampler":
            return error(404, f"unknown upsampler {req.model!r}")
        try:
            low = b64_png(req.image)[None]
        except ValueError as exc:
            return error(400, f"malformed request: {exc}")

        def run():
            sched = respaced(entry.schedule, parse_steps(req.steps))
            cfg = entry.model.config
            x = ancestral_sample(entry.model, None, sched,
                                 (1, cfg.channels, cfg.image_size, cfg.image_size),
                                 [tokenize(req.prompt)],
                                 _job_rng(req.seed, "upsample", req.model_dump()),
                                 extras={"low_res": low}, dtype=np.float32)
            out = metadata(req, req.model, x)
            out["metadata"]["scale"] = None
            return out

        return submit("upsample", req, run)

    @app.post("/v1/echo")
    def echo(req: EchoRequest):
        try:
            mask = png_bytes_to_mask(base64.b64decode(req.mask))
        except Exception as exc:
            return error(400, f"malformed mask: {exc}")
        raw = (mask > 0.5).astype(np.uint8) * 255
        return {
            "width": int(mask.shape[1]),
            "height": int(mask.shape[0]),
            "sha256": hashlib.sha256(raw.tobytes()).hexdigest(),
            "mask": base64.b64encode(mask_to_png_bytes(mask)).decode("ascii"),
        }

    return app


def build_registry(base=None, inpaint_model=None, upsampler=None, clip=None):
    """Registry from checkpoint paths (the serve command's loader)."""
    from .. import diffusion as dfn
    from ..trainer import load_clip, load_denoiser

    registry = Registry()

    def sched_of(header):
        info = header.get("schedule") or {}
        return dfn.make_schedule(info.get("kind") or "cosine", info.get("T") or 1000)

    for name, path in (("base", base), ("inpaint", inpaint_model),
                       ("upsampler", upsampler)):
        if path:
            model, header = load_denoiser(path)
            registry.add(name, model, sched_of(header), "denoiser",
                         image_size=model.config.image_size,
                         variant=model.config.variant)
    if clip:
        model, header = load_clip(clip)
        registry.add("clip", model, sched_of(header), "clip",
                     noised=model.noised)
    return registry


def serve(args):
    import uvicorn

    registry = build_registry(base=args.base, inpaint_model=args.inpaint_model,
                              upsampler=args.upsampler, clip=args.clip)
    app = create_app(registry, queue_size=args.queue_size,
                     concurrency=args.concurrency)
    uvicorn.run(app, host=args.host, port=args.port)
    return None
