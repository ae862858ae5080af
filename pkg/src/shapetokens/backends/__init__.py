"""Backend loading: one config in, one verified suite out.

Configs are flat ``key = value`` files (see :mod:`shapetokens.config`) under
a ``backend.`` prefix, e.g.::

    backend.kind = toy
    backend.seed = 7
    backend.text_dim = 16
    backend.shape_dim = 8
    backend.latent = 4x8x8

External suites name a factory as ``backend.factory = package.module:build``;
the callable receives the :class:`BackendConfig` and returns a
:class:`BackendSuite`. Every loaded suite, toy or external, is probed with a
tiny input so declared dimensions are checked against real output before
anything downstream trusts them.
"""

from __future__ import annotations

import importlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from shapetokens.backends.base import (
    MAX_TOKENS,
    SHAPE_TOKEN_COUNT,
    BackendError,
    BackendSuite,
    ControlDenoiserBackend,
    ControlImageBackend,
    DenoiserBackend,
    DimensionMismatchError,
    ImageFeatureBackend,
    InpainterBackend,
    SegmenterBackend,
    ShapeEncoderBackend,
    TextEncoderBackend,
    ddpm_alphas_cumprod,
)
from shapetokens.backends.toy import make_toy_suite
from shapetokens.config import load_config, parse_value

__all__ = [
    "MAX_TOKENS",
    "SHAPE_TOKEN_COUNT",
    "BackendError",
    "DimensionMismatchError",
    "BackendSuite",
    "BackendConfig",
    "TextEncoderBackend",
    "ShapeEncoderBackend",
    "DenoiserBackend",
    "ControlDenoiserBackend",
    "ImageFeatureBackend",
    "SegmenterBackend",
    "ControlImageBackend",
    "InpainterBackend",
    "ddpm_alphas_cumprod",
    "make_toy_suite",
    "load_backend_suite",
]

_PREFIX = "backend."


@dataclass(frozen=True)
class BackendConfig:
    """Declared backend identity and dimensions."""

    kind: str = "toy"
    seed: int = 0
    text_dim: int = 16
    shape_dim: int = 8
    latent: tuple[int, int, int] = (4, 8, 8)
    factory: str = ""
    model_path: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, object]) -> "BackendConfig":
        known = {f: getattr(cls, f) for f in ("kind", "seed", "text_dim", "shape_dim", "factory")}
        kwargs: dict[str, object] = {}
        paths: dict[str, str] = {}
        latent = cls.latent
        for key, value in mapping.items():
            if not key.startswith(_PREFIX):
                continue
            name = key[len(_PREFIX):]
            if name == "latent":
                parsed = parse_value(str(value)) if isinstance(value, str) else value
                if not (isinstance(parsed, tuple) and len(parsed) == 3):
                    raise BackendError(f"{key}: expected CxHxW dims, got {value!r}")
                latent = parsed  # type: ignore[assignment]
            elif name.startswith("model_path."):
                paths[name[len("model_path."):]] = str(value)
            elif name in known:
                kwargs[name] = type(known[name])(value)  # type: ignore[call-overload]
            else:
                raise BackendError(f"unknown backend config key {key!r}")
        return cls(latent=latent, model_path=paths, **kwargs)  # type: ignore[arg-type]

    @classmethod
    def from_file(cls, path: str | Path) -> "BackendConfig":
        return cls.from_mapping(load_config(path))


def _resolve_factory(spec: str):
    module_name, _, attr = spec.partition(":")
    if not module_name or not attr:
        raise BackendError(f"backend.factory must look like 'package.module:callable', got {spec!r}")
    try:
        module = importlib.import_module(module_name)
    except ImportError as exc:
        raise BackendError(f"cannot import backend factory module {module_name!r}: {exc}") from exc
    try:
        return getattr(module, attr)
    except AttributeError as exc:
        raise BackendError(f"module {module_name!r} has no attribute {attr!r}") from exc


def _probe_suite(suite: BackendSuite, config: BackendConfig) -> None:
    """Run every backend once on a tiny input and check declared dims."""
    emb, layout = suite.text.encode("a chair")
    if emb.shape != (suite.text.max_tokens, config.text_dim):
        raise DimensionMismatchError(
            f"text encoder produced {emb.shape}, config declares "
            f"({suite.text.max_tokens}, {config.text_dim})"
        )
    if suite.text.embed_dim != config.text_dim:
        raise DimensionMismatchError(
            f"text encoder reports embed_dim {suite.text.embed_dim}, config declares {config.text_dim}"
        )
    layout.validate()

    cloud = np.random.default_rng(0).standard_normal((128, 3))
    tokens = suite.shape.encode(cloud)
    if tokens.shape != (suite.shape.token_count, config.shape_dim):
        raise DimensionMismatchError(
            f"shape encoder produced {tokens.shape}, config declares "
            f"({suite.shape.token_count}, {config.shape_dim})"
        )

    latent = suite.denoiser.latent_shape
    if tuple(latent) != tuple(config.latent):
        raise DimensionMismatchError(
            f"denoiser latent shape {latent} != configured {config.latent}"
        )
    schedule = suite.denoiser.alphas_cumprod
    if schedule.shape != (suite.denoiser.t_max + 1,):
        raise DimensionMismatchError(
            f"schedule length {schedule.shape[0]} != t_max + 1 = {suite.denoiser.t_max + 1}"
        )
    if schedule[0] != 1.0:
        raise BackendError("alphas_cumprod[0] must equal 1.0")
    body = schedule[1:]
    if not ((body > 0.0).all() and (body < 1.0).all() and (np.diff(schedule) < 0.0).all()):
        raise BackendError("alphas_cumprod must decrease strictly within (0, 1)")
    noise = suite.denoiser.predict_noise(np.zeros(latent), 1, emb)
    if noise.shape != tuple(latent):
        raise DimensionMismatchError(f"predict_noise produced {noise.shape}, expected {tuple(latent)}")

    feat = suite.features.embed_image(np.zeros((64, 64, 3)))
    if feat.shape != (suite.features.feature_dim,):
        raise DimensionMismatchError(
            f"embed_image produced {feat.shape}, backend declares ({suite.features.feature_dim},)"
        )
    tfeat = suite.features.embed_text("a chair")
    if tfeat.shape != feat.shape:
        raise DimensionMismatchError(f"embed_text produced {tfeat.shape}, expected {feat.shape}")

    mask = suite.segmenter.segment(np.zeros((16, 16, 3)))
    if mask.shape != (16, 16) or not np.isin(mask, (0, 1)).all():
        raise BackendError("segmenter must return an (H, W) mask of 0/1 values")


def load_backend_suite(config: BackendConfig | Mapping[str, object] | str | Path) -> BackendSuite:
    """Build and probe-verify the suite named by ``config``.

    Accepts a :class:`BackendConfig`, a raw mapping with ``backend.*`` keys,
    or a path to a config file.
    """
    if isinstance(config, (str, Path)):
        config = BackendConfig.from_file(config)
    elif isinstance(config, Mapping):
        config = BackendConfig.from_mapping(config)
    if config.kind == "toy":
        suite = make_toy_suite(config.seed, text_dim=config.text_dim, shape_dim=config.shape_dim)
    elif config.kind == "external":
        if not config.factory:
            raise BackendError("external backend config requires backend.factory")
        suite = _resolve_factory(config.factory)(config)
        if not isinstance(suite, BackendSuite):
            raise BackendError(
                f"backend factory {config.factory!r} returned {type(suite).__name__}, expected BackendSuite"
            )
    else:
        raise BackendError(f"unknown backend kind {config.kind!r} (expected 'toy' or 'external')")
    _probe_suite(suite, config)
    return suite
