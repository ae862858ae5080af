"""Inference: images from (shape, prompt, guidance strength) via the frozen
denoiser, plus the latent-handoff procedure for pose-controlled baselines.

The default sampler is a deterministic reverse-step walk over an evenly
strided timestep ladder, so identical inputs and seeds give identical
images. The handoff path runs a depth-conditioned denoiser branch for the
first ceil(K% * steps) invocations, then continues from the intermediate
latent under either the shifted prompt or the plain category prompt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from shapetokens.backends.base import BackendSuite, ControlDenoiserBackend, DenoiserBackend
from shapetokens.geometry import PointCloud, normalize_cloud
from shapetokens.prompts import STRATEGIES, TokenLayout, encode_prompt, expand_template
from shapetokens.residual import GuidanceSpec, MapperParams, ResidualMapper, apply_residual

__all__ = [
    "GenerationError",
    "SamplerConfig",
    "HandoffSpec",
    "HANDOFF_MODES",
    "timestep_ladder",
    "initial_latent",
    "sample_latent",
    "compute_residual",
    "generate",
    "generate_plain",
    "generate_with_handoff",
    "sweep_lambda",
]

HANDOFF_MODES = ("shape_words", "control_stop")


class GenerationError(RuntimeError):
    """Inference could not run (bad sampler config, missing inputs)."""


@dataclass(frozen=True)
class SamplerConfig:
    """Reverse-diffusion knobs. ``cfg_scale`` only matters to external
    backends; the toy denoiser has no unconditional branch to mix in."""

    steps: int = 50
    seed: int = 0
    kind: str = "deterministic"
    cfg_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise GenerationError(f"steps must be >= 1, got {self.steps}")
        if self.kind != "deterministic":
            raise GenerationError(f"unsupported sampler kind {self.kind!r}")


@dataclass(frozen=True)
class HandoffSpec:
    """Run the depth-conditioned branch for ``k_percent`` of the steps.

    ``mode`` picks the phase-two conditioning: ``shape_words`` continues
    under the residual-shifted prompt, ``control_stop`` under the plain
    category prompt. ``category_prompt`` is the phase-one/-two plain prompt
    text (already expanded, no placeholder).
    """

    k_percent: float
    depth: np.ndarray | None = None
    category_prompt: str = ""
    mode: str = "shape_words"

    def __post_init__(self) -> None:
        if not 0 <= self.k_percent <= 100:
            raise GenerationError(f"k_percent must lie in [0, 100], got {self.k_percent}")
        if self.k_percent > 0 and self.depth is None:
            raise GenerationError("depth image required when k_percent > 0")
        if self.mode not in HANDOFF_MODES:
            raise GenerationError(f"mode must be one of {HANDOFF_MODES}, got {self.mode!r}")


def timestep_ladder(t_max: int, steps: int) -> list[int]:
    """Descending timesteps visited by the sampler, evenly strided.

    With ``steps == t_max`` this is t_max..1; fewer steps skip at a fixed
    stride, always starting from t_max.
    """
    if not 1 <= steps <= t_max:
        raise GenerationError(f"steps must lie in 1..{t_max}, got {steps}")
    stride = t_max // steps
    ladder = list(range(t_max, 0, -stride))[:steps]
    return ladder


def initial_latent(denoiser: DenoiserBackend, seed: int) -> np.ndarray:
    """Seeded standard-normal latent; the whole trajectory hangs off this."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal(denoiser.latent_shape)


def _reverse_step(
    schedule: np.ndarray, z: np.ndarray, eps: np.ndarray, t_from: int, t_to: int
) -> np.ndarray:
    a_from = float(schedule[t_from])
    a_to = float(schedule[t_to])
    clean = (z - math.sqrt(1.0 - a_from) * eps) / math.sqrt(a_from)
    return math.sqrt(a_to) * clean + math.sqrt(1.0 - a_to) * eps


def sample_latent(
    denoiser: DenoiserBackend,
    conditioning: np.ndarray,
    sampler: SamplerConfig,
    *,
    control: ControlDenoiserBackend | None = None,
    depth: np.ndarray | None = None,
    control_steps: int = 0,
    counters: dict[str, int] | None = None,
) -> np.ndarray:
    """Run the reverse walk from a seeded normal latent to a clean latent.

    The first ``control_steps`` invocations go to ``control`` (conditioned
    on ``depth``); the rest go to ``denoiser`` under ``conditioning``.
    ``counters`` collects per-branch invocation counts for instrumentation.
    """
    schedule = denoiser.alphas_cumprod
    ladder = timestep_ladder(denoiser.t_max, sampler.steps)
    if control_steps > 0 and (control is None or depth is None):
        raise GenerationError("control branch requested without control backend or depth")
    z = initial_latent(denoiser, sampler.seed)
    for i, t in enumerate(ladder):
        t_next = ladder[i + 1] if i + 1 < len(ladder) else 0
        if i < control_steps:
            eps = control.predict_noise(z, t, depth)
            if counters is not None:
                counters["control"] = counters.get("control", 0) + 1
        else:
            eps = denoiser.predict_noise(z, t, conditioning)
            if counters is not None:
                counters["text"] = counters.get("text", 0) + 1
        eps = np.asarray(eps)
        if eps.shape != z.shape:
            raise GenerationError(f"denoiser output shape {eps.shape} != latent {z.shape}")
        z = _reverse_step(schedule, z, eps, t, t_next)
    return z


def compute_residual(
    suite: BackendSuite,
    params: MapperParams,
    cloud: PointCloud | None,
    prompt_emb: np.ndarray,
    *,
    tokens: np.ndarray | None = None,
) -> np.ndarray:
    """Shape tokens through the mapper; the result is guidance-independent.

    Precomputed ``tokens`` (e.g. a registry cache hit) skip the encoder.
    """
    if tokens is None:
        if cloud is None:
            raise GenerationError("either a cloud or precomputed tokens required")
        tokens = suite.shape.encode(normalize_cloud(cloud).points)
    mapper = ResidualMapper(params)
    delta = mapper(
        torch.as_tensor(tokens, dtype=torch.float32),
        torch.as_tensor(prompt_emb, dtype=torch.float32),
    )
    return delta.detach().numpy()


def _conditioned_embedding(
    suite: BackendSuite,
    params: MapperParams,
    cloud: PointCloud | None,
    template: str,
    category: str,
    spec: GuidanceSpec,
    tokens: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, TokenLayout]:
    prompt = expand_template(template, category)
    emb, layout = encode_prompt(suite.text, prompt, category)
    delta = compute_residual(suite, params, cloud, emb, tokens=tokens)
    shifted = apply_residual(emb, delta, spec, layout)
    return shifted, delta, layout


def generate(
    suite: BackendSuite,
    params: MapperParams,
    cloud: PointCloud | None,
    template: str,
    category: str,
    spec: GuidanceSpec,
    sampler: SamplerConfig,
    *,
    tokens: np.ndarray | None = None,
) -> np.ndarray:
    """Produce one (H, W, 3) image in [0, 1]; deterministic per seed.

    At zero guidance strength the conditioning is a bit-exact copy of the
    plain prompt embedding, so the output matches :func:`generate_plain`.
    """
    shifted, _, _ = _conditioned_embedding(suite, params, cloud, template, category, spec, tokens)
    latent = sample_latent(suite.denoiser, shifted, sampler)
    return suite.denoiser.decode_latent(latent)


def generate_plain(suite: BackendSuite, prompt: str, sampler: SamplerConfig) -> np.ndarray:
    """Reference path: generation from the unmodified prompt embedding."""
    emb, _ = suite.text.encode(prompt)
    latent = sample_latent(suite.denoiser, emb, sampler)
    return suite.denoiser.decode_latent(latent)


def generate_with_handoff(
    suite: BackendSuite,
    params: MapperParams | None,
    handoff: HandoffSpec,
    cloud: PointCloud | None,
    template: str,
    category: str,
    spec: GuidanceSpec,
    sampler: SamplerConfig,
    *,
    counters: dict[str, int] | None = None,
) -> np.ndarray:
    """Depth-branch phase one, then text/shape conditioning from the latent.

    Phase one runs ceil(k_percent/100 * steps) reverse steps under the
    control denoiser; the intermediate latent continues without re-noising.
    At k_percent=100 no prompt shift is ever computed; at 0 this equals
    :func:`generate`.
    """
    phase_one = math.ceil(handoff.k_percent / 100.0 * sampler.steps)
    prompt = handoff.category_prompt or expand_template(template, category)
    if phase_one >= sampler.steps:
        plain_emb, _ = suite.text.encode(prompt)
        latent = sample_latent(
            suite.denoiser,
            plain_emb,
            sampler,
            control=suite.control_denoiser,
            depth=handoff.depth,
            control_steps=sampler.steps,
            counters=counters,
        )
        return suite.denoiser.decode_latent(latent)
    if handoff.mode == "shape_words":
        if params is None or cloud is None:
            raise GenerationError("shape_words handoff requires mapper parameters and a cloud")
        conditioning, _, _ = _conditioned_embedding(
            suite, params, cloud, template, category, spec
        )
    else:
        conditioning, _ = suite.text.encode(prompt)
    latent = sample_latent(
        suite.denoiser,
        conditioning,
        sampler,
        control=suite.control_denoiser if phase_one > 0 else None,
        depth=handoff.depth,
        control_steps=phase_one,
        counters=counters,
    )
    return suite.denoiser.decode_latent(latent)


def sweep_lambda(
    suite: BackendSuite,
    params: MapperParams,
    cloud: PointCloud | None,
    template: str,
    category: str,
    lambdas: Sequence[float],
    strategy: str,
    sampler: SamplerConfig,
    *,
    tokens: np.ndarray | None = None,
) -> list[np.ndarray]:
    """One image per guidance strength, all sharing the same seeded noise.

    The residual is computed once (it does not depend on the strength) and
    re-applied per value.
    """
    if not lambdas:
        raise GenerationError("lambda sweep needs at least one value")
    for lam in lambdas:
        if not 0.0 <= lam <= 1.0:
            raise GenerationError(f"lambda values must lie in [0, 1], got {lam}")
    if strategy not in STRATEGIES:
        raise GenerationError(f"unknown strategy {strategy!r}")
    prompt = expand_template(template, category)
    emb, layout = encode_prompt(suite.text, prompt, category)
    delta = compute_residual(suite, params, cloud, emb, tokens=tokens)
    images = []
    for lam in lambdas:
        shifted = apply_residual(emb, delta, GuidanceSpec(lam, strategy), layout)
        latent = sample_latent(suite.denoiser, shifted, sampler)
        images.append(suite.denoiser.decode_latent(latent))
    return images
