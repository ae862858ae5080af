"""HTTP surface for the pipeline: shape listing, encoding, generation,
sweeps, and run retrieval.

Handlers are stateless over a shared immutable state object (backends,
mapper parameters, registry). Generation work runs under a bounded pool of
work slots; requests that find no free slot are rejected with 429 rather
than queued without limit. Completed runs are persisted under
``runs/{id}/`` as request.json, image.png (or image_NN.png for sweeps),
and metrics.json.
"""

from __future__ import annotations

import base64
import json
import re
import threading
import time
import uuid
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field, field_validator

from shapetokens.backends import BackendSuite
from shapetokens.evaluation import EvaluationError, clip_score
from shapetokens.generation import (
    GenerationError,
    HandoffSpec,
    SamplerConfig,
    generate,
    generate_with_handoff,
    sweep_lambda,
)
from shapetokens.geometry import ViewSpec, render_depth, save_image_png
from shapetokens.prompts import PromptError, STRATEGIES, encode_prompt, expand_template
from shapetokens.registry import RegistryError, ShapeRegistry
from shapetokens.residual import GuidanceSpec, MapperParams

__all__ = ["ServiceState", "WorkSlots", "create_app"]


class WorkSlots:
    """Fixed number of concurrent generation slots; acquisition never blocks."""

    def __init__(self, slots: int) -> None:
        if slots < 1:
            raise ValueError("need at least one work slot")
        self._sem = threading.BoundedSemaphore(slots)

    def try_acquire(self) -> bool:
        return self._sem.acquire(blocking=False)

    def release(self) -> None:
        self._sem.release()


@dataclass
class ServiceState:
    """Everything handlers read; built once, then immutable in practice."""

    suite: BackendSuite | None = None
    params: MapperParams | None = None
    registry: ShapeRegistry | None = None
    runs_dir: Path = Path("runs")
    slots: WorkSlots = field(default_factory=lambda: WorkSlots(4))
    ready: threading.Event = field(default_factory=threading.Event)

    def mark_ready(self) -> None:
        if self.suite is None or self.params is None or self.registry is None:
            raise RuntimeError("state incomplete: suite, params, and registry required")
        self.ready.set()


class GenerateRequest(BaseModel):
    model_config = {"populate_by_name": True}

    shape_id: str
    prompt_template: str
    lam: float = Field(default=1.0, alias="lambda")
    strategy: str = "object_and_eos"
    seed: int = 0
    steps: int = 50
    handoff_k: float | None = None
    depth_ref: float | None = None  # turntable azimuth the depth is rendered from
    handoff_mode: str = "shape_words"

    @field_validator("lam")
    @classmethod
    def _lam_range(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("must lie in [0, 1]")
        return v

    @field_validator("strategy")
    @classmethod
    def _known_strategy(cls, v: str) -> str:
        if v not in STRATEGIES:
            raise ValueError(f"must be one of {', '.join(STRATEGIES)}")
        return v

    @field_validator("steps")
    @classmethod
    def _steps_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("handoff_k")
    @classmethod
    def _k_range(cls, v: float | None) -> float | None:
        if v is not None and not 0.0 <= v <= 100.0:
            raise ValueError("must lie in [0, 100]")
        return v


class SweepRequest(BaseModel):
    model_config = {"populate_by_name": True}

    shape_id: str
    prompt_template: str
    lambdas: list[float] = Field(alias="lambdas")
    strategy: str = "object_and_eos"
    seed: int = 0
    steps: int = 50

    @field_validator("lambdas")
    @classmethod
    def _lambdas_range(cls, v: list[float]) -> list[float]:
        if not v:
            raise ValueError("must be nonempty")
        for lam in v:
            if not 0.0 <= lam <= 1.0:
                raise ValueError("every value must lie in [0, 1]")
        return v

    @field_validator("strategy")
    @classmethod
    def _known_strategy(cls, v: str) -> str:
        if v not in STRATEGIES:
            raise ValueError(f"must be one of {', '.join(STRATEGIES)}")
        return v


class EncodeShapeRequest(BaseModel):
    shape_id: str


def _b64_png(image: np.ndarray, path: Path) -> str:
    """Persist the image and return the same bytes base64-encoded."""
    save_image_png(image, path)
    return base64.b64encode(path.read_bytes()).decode("ascii")


def _new_run_dir(runs_dir: Path) -> tuple[str, Path]:
    run_id = time.strftime("%Y%m%d-%H%M%S") + "-" + uuid.uuid4().hex[:8]
    run_dir = runs_dir / run_id
    run_dir.mkdir(parents=True)
    return run_id, run_dir


def create_app(
    state: ServiceState,
    loader: Callable[[ServiceState], None] | None = None,
) -> FastAPI:
    """Build the application around a state object.

    With a ``loader`` the backends are constructed on a startup thread and
    every data endpoint answers 503 until it finishes; without one the
    state must already be complete.
    """
    if loader is None:
        state.mark_ready()

    @asynccontextmanager
    async def _lifespan(app: FastAPI):
        if loader is not None and not state.ready.is_set():
            threading.Thread(target=loader, args=(state,), daemon=True).start()
        yield

    app = FastAPI(title="shapetokens service", lifespan=_lifespan)

    @app.exception_handler(RequestValidationError)
    async def _validation_to_400(request: Request, exc: RequestValidationError):
        fields = []
        for err in exc.errors():
            loc = [str(part) for part in err.get("loc", ()) if part != "body"]
            fields.append({"field": ".".join(loc) or "body", "message": err.get("msg", "")})
        return JSONResponse(status_code=400, content={"detail": "validation failed",
                                                      "errors": fields})

    def _error(status: int, message: str) -> JSONResponse:
        return JSONResponse(status_code=status, content={"detail": message})

    def _require_ready() -> JSONResponse | None:
        if not state.ready.is_set():
            return _error(503, "backends are still loading")
        return None

    @app.get("/health")
    def health():
        if not state.ready.is_set():
            return JSONResponse(status_code=503,
                                content={"status": "loading", "backend": None})
        return {"status": "ok", "backend": state.suite.kind}

    @app.get("/shapes")
    def shapes():
        not_ready = _require_ready()
        if not_ready is not None:
            return not_ready
        entries = [
            {"shape_id": sid, "category": state.registry.get(sid).category}
            for sid in state.registry.ids()
        ]
        return {"shapes": entries}

    @app.post("/encode_shape")
    def encode_shape(req: EncodeShapeRequest):
        not_ready = _require_ready()
        if not_ready is not None:
            return not_ready
        try:
            cached = state.registry.is_cached(req.shape_id)
            tokens = state.registry.tokens(req.shape_id, state.suite.shape)
        except RegistryError as exc:
            return _error(404, str(exc.args[0]) if exc.args else str(exc))
        return {
            "shape_id": req.shape_id,
            "token_count": int(tokens.shape[0]),
            "shape_dim": int(tokens.shape[1]),
            "cache_hit": cached,
        }

    def _layout_payload(template: str, category: str) -> dict:
        prompt = expand_template(template, category)
        _, layout = encode_prompt(state.suite.text, prompt, category)
        return {
            "shape_span": list(layout.shape_span),
            "eos_index": layout.eos_index,
            "prompt": prompt,
        }

    @app.post("/generate")
    def generate_endpoint(req: GenerateRequest):
        not_ready = _require_ready()
        if not_ready is not None:
            return not_ready
        try:
            entry = state.registry.get(req.shape_id)
        except RegistryError as exc:
            return _error(404, str(exc.args[0]) if exc.args else str(exc))
        if not state.slots.try_acquire():
            return _error(429, "generation queue is full, retry later")
        try:
            started = time.perf_counter()
            cloud = state.registry.load_cloud(req.shape_id)
            tokens = state.registry.tokens(req.shape_id, state.suite.shape)
            sampler = SamplerConfig(steps=req.steps, seed=req.seed)
            spec = GuidanceSpec(req.lam, req.strategy)
            try:
                layout_info = _layout_payload(req.prompt_template, entry.category)
                if req.handoff_k is not None:
                    if req.handoff_k > 0 and req.depth_ref is None:
                        return _error(400, "depth_ref required when handoff_k > 0")
                    depth = None
                    if req.depth_ref is not None:
                        view = ViewSpec(req.depth_ref, height=64, width=64)
                        depth = render_depth(cloud, view)
                    handoff = HandoffSpec(req.handoff_k, depth,
                                          layout_info["prompt"], req.handoff_mode)
                    image = generate_with_handoff(
                        state.suite, state.params, handoff, cloud,
                        req.prompt_template, entry.category, spec, sampler,
                    )
                else:
                    image = generate(
                        state.suite, state.params, cloud, req.prompt_template,
                        entry.category, spec, sampler, tokens=tokens,
                    )
            except (GenerationError, PromptError, EvaluationError) as exc:
                return _error(400, str(exc))
            run_id, run_dir = _new_run_dir(state.runs_dir)
            payload = _b64_png(image, run_dir / "image.png")
            elapsed_ms = (time.perf_counter() - started) * 1000.0
            metrics = {"clip": clip_score(state.suite.features, image, layout_info["prompt"])}
            (run_dir / "request.json").write_text(
                req.model_dump_json(by_alias=True, indent=2), encoding="utf-8"
            )
            (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=2),
                                                  encoding="utf-8")
            return {
                "run_id": run_id,
                "image": payload,
                "timing_ms": elapsed_ms,
                "layout": {"shape_span": layout_info["shape_span"],
                           "eos_index": layout_info["eos_index"]},
                "metrics": metrics,
            }
        finally:
            state.slots.release()

    @app.post("/sweep")
    def sweep_endpoint(req: SweepRequest):
        not_ready = _require_ready()
        if not_ready is not None:
            return not_ready
        try:
            entry = state.registry.get(req.shape_id)
        except RegistryError as exc:
            return _error(404, str(exc.args[0]) if exc.args else str(exc))
        if not state.slots.try_acquire():
            return _error(429, "generation queue is full, retry later")
        try:
            started = time.perf_counter()
            cloud = state.registry.load_cloud(req.shape_id)
            tokens = state.registry.tokens(req.shape_id, state.suite.shape)
            sampler = SamplerConfig(steps=req.steps, seed=req.seed)
            try:
                layout_info = _layout_payload(req.prompt_template, entry.category)
                images = sweep_lambda(
                    state.suite, state.params, cloud, req.prompt_template,
                    entry.category, req.lambdas, req.strategy, sampler, tokens=tokens,
                )
            except (GenerationError, PromptError) as exc:
                return _error(400, str(exc))
            run_id, run_dir = _new_run_dir(state.runs_dir)
            payloads = [
                _b64_png(img, run_dir / f"image_{i:02d}.png")
                for i, img in enumerate(images)
            ]
            elapsed_ms = (time.perf_counter() - started) * 1000.0
            metrics = {"lambdas": list(req.lambdas)}
            (run_dir / "request.json").write_text(
                req.model_dump_json(by_alias=True, indent=2), encoding="utf-8"
            )
            (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=2),
                                                  encoding="utf-8")
            return {
                "run_id": run_id,
                "images": payloads,
                "lambdas": list(req.lambdas),
                "timing_ms": elapsed_ms,
                "layout": {"shape_span": layout_info["shape_span"],
                           "eos_index": layout_info["eos_index"]},
            }
        finally:
            state.slots.release()

    @app.get("/runs/{run_id}")
    def get_run(run_id: str):
        not_ready = _require_ready()
        if not_ready is not None:
            return not_ready
        if not re.fullmatch(r"[A-Za-z0-9-]+", run_id):
            return _error(404, f"unknown run id {run_id!r}")
        run_dir = state.runs_dir / run_id
        if not run_dir.is_dir():
            return _error(404, f"unknown run id {run_id!r}")
        record: dict[str, object] = {"run_id": run_id}
        request_path = run_dir / "request.json"
        metrics_path = run_dir / "metrics.json"
        if request_path.exists():
            record["request"] = json.loads(request_path.read_text(encoding="utf-8"))
        if metrics_path.exists():
            record["metrics"] = json.loads(metrics_path.read_text(encoding="utf-8"))
        images = sorted(run_dir.glob("image*.png"))
        record["images"] = [
            base64.b64encode(p.read_bytes()).decode("ascii") for p in images
        ]
        return record

    return app
