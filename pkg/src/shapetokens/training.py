"""Optimizing the residual mapper against a frozen denoiser.

The loss is a timestep-weighted noise-matching objective: inject known noise
into the target image's latent, ask the denoiser for its noise estimate
under the residual-shifted prompt, and penalize the squared error, weighted
by a Gaussian-windowed function of the timestep. Gradients flow through the
frozen denoiser into the mapper parameters only.

During training the residual is applied to all 77 token rows at full
strength; row-selective strategies are an inference-time concern.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields as dataclass_fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from shapetokens.backends.base import BackendSuite, DenoiserBackend
from shapetokens.dataset import read_manifest
from shapetokens.geometry import load_cloud, load_image_png, normalize_cloud
from shapetokens.prompts import TokenLayout
from shapetokens.residual import (
    GuidanceSpec,
    MapperParams,
    ResidualMapper,
    apply_residual,
    save_params,
)

__all__ = [
    "TrainingError",
    "SdsConfig",
    "TrainConfig",
    "TrainingTriplet",
    "TrainResult",
    "dreamtime_weights",
    "dreamtime_weight",
    "noisify",
    "sds_loss",
    "augment_crop",
    "lr_at",
    "load_triplets",
    "train",
]


class TrainingError(RuntimeError):
    """Training could not proceed (bad data, divergence, bad config)."""


@dataclass(frozen=True)
class SdsConfig:
    """Timestep weighting: signal-to-noise factor times a Gaussian window.

    The window peaks at ``center`` with width ``width``; weights are
    normalized to sum to one over t = 1..t_max unless ``z_override`` is set,
    in which case that value replaces the computed normalizer.
    """

    center: float = 500.0
    width: float = 250.0
    t_max: int = 1000
    z_override: float | None = None

    def __post_init__(self) -> None:
        if self.t_max < 1:
            raise ValueError(f"t_max must be >= 1, got {self.t_max}")
        if self.width <= 0:
            raise ValueError(f"width must be positive, got {self.width}")


def dreamtime_weights(cfg: SdsConfig, schedule: np.ndarray) -> np.ndarray:
    """Weight vector indexed by timestep; entry 0 is unused and set to 0.

    Entry t (1-based) is sqrt((1 - a_t) / a_t) * exp(-(t - center)^2 /
    (2 width^2)) divided by the normalizer over all timesteps.
    """
    schedule = np.asarray(schedule, dtype=np.float64)
    if schedule.shape != (cfg.t_max + 1,):
        raise ValueError(
            f"schedule length {schedule.shape[0]} does not match t_max + 1 = {cfg.t_max + 1}"
        )
    t = np.arange(1, cfg.t_max + 1, dtype=np.float64)
    a = schedule[1:]
    raw = np.sqrt((1.0 - a) / a) * np.exp(-((t - cfg.center) ** 2) / (2.0 * cfg.width**2))
    z = float(raw.sum()) if cfg.z_override is None else cfg.z_override
    if z <= 0:
        raise ValueError(f"normalizer must be positive, got {z}")
    out = np.zeros(cfg.t_max + 1)
    out[1:] = raw / z
    return out


def dreamtime_weight(t: int, cfg: SdsConfig, schedule: np.ndarray) -> float:
    """One normalized timestep weight; t must lie in 1..t_max."""
    if not 1 <= t <= cfg.t_max:
        raise ValueError(f"timestep {t} outside 1..{cfg.t_max}")
    return float(dreamtime_weights(cfg, schedule)[t])


def noisify(latent: Any, t: int, noise: Any, schedule: np.ndarray) -> Any:
    """Forward diffusion step: sqrt(a_t) * latent + sqrt(1 - a_t) * noise."""
    if not 1 <= t <= len(schedule) - 1:
        raise ValueError(f"timestep {t} outside 1..{len(schedule) - 1}")
    if tuple(np.shape(latent)) != tuple(np.shape(noise)):
        raise ValueError(f"noise shape {np.shape(noise)} != latent shape {np.shape(latent)}")
    a = float(schedule[t])
    return math.sqrt(a) * latent + math.sqrt(1.0 - a) * noise


def sds_loss(
    denoiser: DenoiserBackend,
    shape_tokens: np.ndarray,
    prompt_emb: np.ndarray,
    layout: TokenLayout,
    params: MapperParams,
    latent: np.ndarray,
    t: int,
    noise: np.ndarray,
    cfg: SdsConfig,
) -> tuple[float, list[torch.Tensor]]:
    """Weighted noise-matching loss and its gradients w.r.t. the mapper.

    Returns gradient tensors aligned with ``params.tensors()``; parameters
    the loss does not reach get explicit zero gradients.
    """
    params.requires_grad_(True)
    mapper = ResidualMapper(params)
    schedule = denoiser.alphas_cumprod
    weight = dreamtime_weight(t, cfg, schedule)
    t_emb = torch.as_tensor(np.asarray(prompt_emb, dtype=np.float64))
    delta = mapper(torch.as_tensor(np.asarray(shape_tokens, dtype=np.float64)), t_emb)
    guided = apply_residual(t_emb, delta, GuidanceSpec(1.0, "all_tokens"), layout)
    noisy = noisify(
        torch.as_tensor(np.asarray(latent, dtype=np.float64)),
        t,
        torch.as_tensor(np.asarray(noise, dtype=np.float64)),
        schedule,
    )
    estimate = denoiser.predict_noise(noisy, t, guided)
    residual = estimate - torch.as_tensor(np.asarray(noise, dtype=np.float64))
    loss = weight * (residual**2).sum()
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {float(loss)} at timestep {t}")
    tensors = params.tensors()
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, tensors, allow_unused=True)
        grads = [
            g if g is not None else torch.zeros_like(p) for g, p in zip(grads, tensors)
        ]
    else:
        grads = [torch.zeros_like(p) for p in tensors]
    return float(loss.detach()), grads


def augment_crop(
    image: np.ndarray,
    max_scale: float = 0.8,
    rng: np.random.Generator | None = None,
    min_scale: float = 0.5,
) -> np.ndarray:
    """Random square crop at scale [min_scale, max_scale], resized back.

    The crop side is a fraction of the shorter image side and its position
    is uniform among valid placements. A full-image crop is returned as an
    exact copy; anything smaller is resampled bilinearly to the input size.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim not in (2, 3):
        raise ValueError(f"expected (H, W) or (H, W, C) image, got {img.shape}")
    if not 0.0 < min_scale <= max_scale <= 1.0:
        raise ValueError(f"need 0 < min_scale <= max_scale <= 1, got {min_scale}, {max_scale}")
    rng = rng if rng is not None else np.random.default_rng()
    h, w = img.shape[:2]
    side = int(round(rng.uniform(min_scale, max_scale) * min(h, w)))
    side = max(1, min(side, min(h, w)))
    y0 = int(rng.integers(0, h - side + 1))
    x0 = int(rng.integers(0, w - side + 1))
    crop = img[y0 : y0 + side, x0 : x0 + side]
    if crop.shape[:2] == (h, w):
        return crop.copy()
    return _resize_bilinear(crop, h, w)


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = img.shape[:2]
    ys = np.linspace(0.0, in_h - 1.0, out_h)
    xs = np.linspace(0.0, in_w - 1.0, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = (ys - y0).reshape(-1, 1)
    fx = (xs - x0).reshape(1, -1)
    if img.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    warmup_steps: int = 1000
    epochs: int = 55
    batch_size: int = 8
    crop_max_scale: float = 0.8
    crop_min_scale: float = 0.5
    seed: int = 0
    timestep_sampling: str = "uniform"
    sds_center: float = 500.0
    sds_width: float = 250.0
    max_steps: int | None = None
    checkpoint_every_epochs: int = 1

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.warmup_steps < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("warmup_steps >= 0, epochs >= 1, batch_size >= 1 required")
        if self.timestep_sampling != "uniform":
            raise ValueError(f"unsupported timestep sampling {self.timestep_sampling!r}")

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, object]) -> "TrainConfig":
        kwargs = {}
        valid = {f.name for f in dataclass_fields(cls)}
        for key, value in mapping.items():
            if not key.startswith("train."):
                continue
            name = key[len("train."):]
            if name not in valid:
                raise TrainingError(f"unknown training config key {key!r}")
            kwargs[name] = value
        return cls(**kwargs)  # type: ignore[arg-type]


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from zero, then constant."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if cfg.warmup_steps == 0 or step >= cfg.warmup_steps:
        return cfg.learning_rate
    return cfg.learning_rate * step / cfg.warmup_steps


@dataclass(frozen=True)
class TrainingTriplet:
    shape_id: str
    shape_tokens: np.ndarray
    prompt: str
    prompt_emb: np.ndarray
    layout: TokenLayout
    image: np.ndarray
    view_index: int


@dataclass
class TrainResult:
    params: MapperParams
    log: list[dict]
    best_loss: float
    checkpoint_paths: list[Path]


def load_triplets(manifest_path: str | Path, suite: BackendSuite) -> list[TrainingTriplet]:
    """Materialize manifest records: encode clouds and prompts, load images.

    Shape tokens and prompt embeddings are cached by value, so a manifest
    with 30 views per shape encodes each cloud once.
    """
    manifest_path = Path(manifest_path)
    records = read_manifest(manifest_path)
    if not records:
        raise TrainingError(f"manifest {manifest_path} has no records")
    root = manifest_path.parent
    cloud_cache: dict[str, np.ndarray] = {}
    prompt_cache: dict[str, tuple[np.ndarray, TokenLayout]] = {}
    triplets = []
    for record in records:
        cloud_path = Path(record["cloud_path"])
        if not cloud_path.is_absolute():
            cloud_path = root / cloud_path
        key = str(cloud_path)
        if key not in cloud_cache:
            cloud = normalize_cloud(load_cloud(cloud_path, source_id=record["shape_id"]))
            cloud_cache[key] = suite.shape.encode(cloud.points)
        prompt = str(record["prompt"])
        if prompt not in prompt_cache:
            prompt_cache[prompt] = suite.text.encode(prompt)
        emb, layout = prompt_cache[prompt]
        image_path = Path(record["image_path"])
        if not image_path.is_absolute():
            image_path = root / image_path
        triplets.append(TrainingTriplet(
            shape_id=str(record["shape_id"]),
            shape_tokens=cloud_cache[key],
            prompt=prompt,
            prompt_emb=emb,
            layout=layout,
            image=load_image_png(image_path),
            view_index=int(record["view_index"]),
        ))
    return triplets


def train(
    manifest_path: str | Path,
    suite: BackendSuite,
    params: MapperParams,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Run the optimization loop; returns float32 parameters and a step log.

    Each step samples a batch of triplets, crops their images, encodes them
    to latents, draws a fresh timestep and noise per item, and averages the
    per-item gradients. Checkpoints land in ``out_dir`` (when given) every
    ``checkpoint_every_epochs`` epochs plus whenever the smoothed loss
    improves; the final parameters are always written.
    """
    triplets = load_triplets(manifest_path, suite)
    denoiser = suite.denoiser
    sds_cfg = SdsConfig(center=cfg.sds_center, width=cfg.sds_width, t_max=denoiser.t_max)
    rng = np.random.default_rng(cfg.seed)
    working = params.to_dtype(torch.float64).requires_grad_(True)
    tensors = working.tensors()
    optimizer = torch.optim.Adam(tensors, lr=cfg.learning_rate)
    steps_per_epoch = max(1, math.ceil(len(triplets) / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    log: list[dict] = []
    checkpoints: list[Path] = []
    best_loss = math.inf
    step = 0
    for epoch in range(cfg.epochs):
        for _ in range(steps_per_epoch):
            if step >= total_steps:
                break
            lr = lr_at(step, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            picks = rng.integers(0, len(triplets), size=cfg.batch_size)
            batch_grads = None
            batch_loss = 0.0
            last_t = 0
            for pick in picks:
                triplet = triplets[int(pick)]
                cropped = augment_crop(
                    triplet.image, cfg.crop_max_scale, rng, cfg.crop_min_scale
                )
                latent = denoiser.encode_image(cropped)
                t = int(rng.integers(1, denoiser.t_max + 1))
                last_t = t
                noise = rng.standard_normal(denoiser.latent_shape)
                loss, grads = sds_loss(
                    denoiser, triplet.shape_tokens, triplet.prompt_emb,
                    triplet.layout, working, latent, t, noise, sds_cfg,
                )
                batch_loss += loss
                if batch_grads is None:
                    batch_grads = [g.clone() for g in grads]
                else:
                    for acc, g in zip(batch_grads, grads):
                        acc += g
            batch_loss /= cfg.batch_size
            optimizer.zero_grad(set_to_none=True)
            for tensor, grad in zip(tensors, batch_grads):
                tensor.grad = grad / cfg.batch_size
            optimizer.step()
            log.append({"step": step, "t": last_t, "loss": batch_loss, "lr": lr})
            step += 1
        if out_path is not None and (epoch + 1) % cfg.checkpoint_every_epochs == 0:
            ckpt = out_path / f"epoch{epoch + 1:04d}.params"
            save_params(working, ckpt)
            checkpoints.append(ckpt)
        recent = [entry["loss"] for entry in log[-steps_per_epoch:]]
        if recent:
            smoothed = float(np.mean(recent))
            if smoothed < best_loss:
                best_loss = smoothed
                if out_path is not None:
                    best = out_path / "best.params"
                    save_params(working, best)
                    if best not in checkpoints:
                        checkpoints.append(best)
        if step >= total_steps:
            break
    final = working.to_dtype(torch.float32)
    if out_path is not None:
        final_path = out_path / "final.params"
        save_params(final, final_path)
        checkpoints.append(final_path)
        with open(out_path / "train_log.jsonl", "w", encoding="utf-8") as fh:
            for entry in log:
                fh.write(json.dumps(entry) + "\n")
    if math.isinf(best_loss):
        best_loss = float("nan")
    return TrainResult(final, log, best_loss, checkpoints)
