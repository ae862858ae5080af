"""Self-contained desk-scale backend suite.

Every component here is deterministic given its construction seed: weights
and vocabulary embeddings derive from sha256 of namespaced string keys, so
two processes built with the same seed agree bit for bit. The denoisers run
in torch (float64) so that losses stay differentiable through them; all
other components are plain numpy.

Scale: 16-dim text embeddings, 8-dim shape tokens, a (4, 8, 8) latent over
64x64 images, 100 diffusion steps, 32-dim image/text features.
"""

from __future__ import annotations

import hashlib
import re
from typing import Any

import numpy as np
import torch

from shapetokens.backends.base import (
    MAX_TOKENS,
    SHAPE_TOKEN_COUNT,
    BackendError,
    BackendSuite,
    ControlDenoiserBackend,
    ControlImageBackend,
    DenoiserBackend,
    ImageFeatureBackend,
    InpainterBackend,
    SegmenterBackend,
    ShapeEncoderBackend,
    TextEncoderBackend,
    ddpm_alphas_cumprod,
)
from shapetokens.geometry import GeometryError, PointCloud, group_patches
from shapetokens.prompts import TokenLayout

__all__ = [
    "TOY_TEXT_DIM",
    "TOY_SHAPE_DIM",
    "TOY_LATENT_SHAPE",
    "TOY_T_MAX",
    "TOY_FEATURE_DIM",
    "TOY_IMAGE_SIZE",
    "ToyTextEncoder",
    "ToyShapeEncoder",
    "ToyDenoiser",
    "ToyControlDenoiser",
    "ToyImageFeatures",
    "ToySegmenter",
    "ToyControlImage",
    "ToyInpainter",
    "make_toy_suite",
]

TOY_TEXT_DIM = 16
TOY_SHAPE_DIM = 8
TOY_LATENT_SHAPE = (4, 8, 8)
TOY_T_MAX = 100
TOY_FEATURE_DIM = 32
TOY_IMAGE_SIZE = 64

# Synthesized images paint the foreground with this flat color and fill the
# background with noise whose red stays below it; see ToySegmenter.
_FOREGROUND_BASE = np.array([0.78, 0.31, 0.24])
_BG_RED_MAX = 0.40
_SEG_RED_MIN = 0.45
_SEG_GREEN_MAX = 0.38


def _key_rng(key: str) -> np.random.Generator:
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _unit_vector(key: str, dim: int) -> np.ndarray:
    v = _key_rng(key).standard_normal(dim)
    return v / np.linalg.norm(v)


def _weight(key: str, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = shape[-1]
    return _key_rng(key).standard_normal(shape) / np.sqrt(fan_in)


_TOKEN_RE = re.compile(r"[a-z0-9]+(?:[-'][a-z0-9]+)*")


def _simple_tokens(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _as_float_image(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def _block_mean(plane: np.ndarray, out_size: int) -> np.ndarray:
    h, w = plane.shape
    if h % out_size or w % out_size:
        raise BackendError(f"image size {plane.shape} not divisible into {out_size}x{out_size} blocks")
    bh, bw = h // out_size, w // out_size
    return plane.reshape(out_size, bh, out_size, bw).mean(axis=(1, 3))


class ToyTextEncoder(TextEncoderBackend):
    """Vocabulary-hash embedding table over whitespace tokens.

    Slot 0 is a begin marker, content words follow, then one end marker, and
    the remaining slots repeat a pad vector. No positional mixing: the same
    word always contributes the same row.
    """

    def __init__(self, seed: int = 0, dim: int = TOY_TEXT_DIM):
        self._seed = seed
        self._dim = dim
        self._begin = _unit_vector(f"{seed}/text/special/begin", dim)
        self._end = _unit_vector(f"{seed}/text/special/end", dim)
        self._pad = _unit_vector(f"{seed}/text/special/pad", dim)

    @property
    def embed_dim(self) -> int:
        return self._dim

    def tokenize(self, text: str) -> list[str]:
        return _simple_tokens(text)

    def encode(self, text: str) -> tuple[np.ndarray, TokenLayout]:
        words = self.tokenize(text)
        if not words:
            raise BackendError(f"prompt {text!r} contains no encodable tokens")
        limit = self.max_tokens - self.content_offset - 1
        if len(words) > limit:
            raise BackendError(f"prompt has {len(words)} tokens, limit is {limit}")
        emb = np.tile(self._pad, (self.max_tokens, 1))
        emb[0] = self._begin
        for i, word in enumerate(words):
            emb[self.content_offset + i] = _unit_vector(f"{self._seed}/text/word/{word}", self._dim)
        eos = self.content_offset + len(words)
        emb[eos] = self._end
        layout = TokenLayout(eos_index=eos, content_length=eos + 1)
        return emb, layout


class ToyShapeEncoder(ShapeEncoderBackend):
    """Patch-statistics encoder: one class token plus 64 local patch tokens.

    Patches come from farthest-point-sampled centers with nearest-neighbor
    groups; each patch summarizes position and spread, then passes through a
    fixed random tanh layer.
    """

    def __init__(self, seed: int = 0, dim: int = TOY_SHAPE_DIM):
        self._dim = dim
        self._w = _weight(f"{seed}/shape/proj/w", (dim, 8))
        self._b = _key_rng(f"{seed}/shape/proj/b").standard_normal(dim) * 0.1

    @property
    def shape_dim(self) -> int:
        return self._dim

    def _project(self, raw: np.ndarray) -> np.ndarray:
        return np.tanh(raw @ self._w.T + self._b)

    def encode(self, points: np.ndarray) -> np.ndarray:
        cloud = points if isinstance(points, PointCloud) else PointCloud(points)
        patch_count = SHAPE_TOKEN_COUNT - 1
        if len(cloud) < patch_count:
            raise GeometryError(f"need at least {patch_count} points, got {len(cloud)}")
        patches = group_patches(cloud, num_patches=patch_count, group_size=min(16, len(cloud)))
        raw = np.empty((SHAPE_TOKEN_COUNT, 8))
        pts = cloud.points
        raw[0] = self._summary(pts, pts.mean(axis=0))
        for i, group in enumerate(patches.groups):
            raw[1 + i] = self._summary(pts[group], patches.centers[i])
        return self._project(raw)

    @staticmethod
    def _summary(pts: np.ndarray, anchor: np.ndarray) -> np.ndarray:
        spread = pts.std(axis=0)
        radii = np.linalg.norm(pts - anchor, axis=1)
        return np.concatenate([anchor, spread, [radii.mean(), radii.max()]])


def _spatial_basis(side: int, channels: int) -> np.ndarray:
    """Orthonormal low-frequency modes per latent channel.

    Four modes over the spatial grid (constant, column curvature, row
    curvature, horizontal gradient), each living in one channel, giving a
    ``channels * 4`` column basis over the flattened latent. Conditioning
    decodes through these, so a prompt shift steers global color and coarse
    layout rather than arbitrary per-cell noise.
    """
    u = (np.arange(side) - (side - 1) / 2.0) / ((side - 1) / 2.0)
    ones = np.ones((side, side))
    qx = np.tile(u**2 - np.mean(u**2), (side, 1))
    qy = qx.T
    gy = np.tile(u.reshape(-1, 1), (1, side))
    modes = [m / np.linalg.norm(m) for m in (ones, qx, qy, gy)]
    basis = np.zeros((channels * side * side, channels * len(modes)))
    for c in range(channels):
        for j, mode in enumerate(modes):
            col = np.zeros((channels, side, side))
            col[c] = mode
            basis[:, c * len(modes) + j] = col.reshape(-1)
    return basis


class _ConditioningHead:
    """Frozen map from a conditioning vector to a clean-latent estimate.

    A seeded tanh layer produces coefficients for the fixed spatial basis;
    the result passes through a final tanh to stay inside (-1, 1), matching
    the range of encoded images.
    """

    _GAIN = 8.0

    def __init__(self, key: str, in_dim: int, latent_shape: tuple[int, int, int]):
        channels, side, _ = latent_shape
        coeff_dim = channels * 4
        self._latent_shape = latent_shape
        self.w1 = torch.from_numpy(_weight(f"{key}/w1", (coeff_dim, in_dim)))
        self.b1 = torch.from_numpy(_key_rng(f"{key}/b1").standard_normal(coeff_dim) * 0.3)
        self.basis = torch.from_numpy(_spatial_basis(side, channels))

    def __call__(self, h: torch.Tensor) -> torch.Tensor:
        coeffs = torch.tanh(self.w1 @ h + self.b1)
        flat = torch.tanh(self._GAIN * (self.basis @ coeffs))
        return flat.reshape(self._latent_shape)


class _EpsilonFromCleanEstimate:
    """Shared denoiser arithmetic.

    The backend predicts a clean latent from its conditioning and converts
    that estimate to a noise prediction through the forward-process identity
    ``noisy = sqrt(a) * clean + sqrt(1 - a) * noise``.
    """

    _schedule: np.ndarray
    _latent_shape = TOY_LATENT_SHAPE

    def _epsilon(self, noisy: torch.Tensor, t: int, clean_estimate: torch.Tensor) -> torch.Tensor:
        if not 1 <= t <= len(self._schedule) - 1:
            raise BackendError(f"timestep {t} outside 1..{len(self._schedule) - 1}")
        a = float(self._schedule[t])
        return (noisy - np.sqrt(a) * clean_estimate) / np.sqrt(1.0 - a)

    def _dispatch(self, noisy_latent: Any, t: int, conditioning: Any, embed) -> Any:
        torch_mode = isinstance(noisy_latent, torch.Tensor) or isinstance(conditioning, torch.Tensor)
        if isinstance(noisy_latent, torch.Tensor):
            noisy = noisy_latent.to(torch.float64)
        else:
            noisy = torch.as_tensor(np.asarray(noisy_latent, dtype=np.float64))
        if isinstance(conditioning, torch.Tensor):
            cond = conditioning.to(torch.float64)
        else:
            cond = torch.as_tensor(np.asarray(conditioning, dtype=np.float64))
        if tuple(noisy.shape) != self._latent_shape:
            raise BackendError(f"latent shape {tuple(noisy.shape)} != {self._latent_shape}")
        if torch_mode:
            return self._epsilon(noisy, t, embed(cond))
        with torch.no_grad():
            return self._epsilon(noisy, t, embed(cond)).numpy()


class ToyDenoiser(_EpsilonFromCleanEstimate, DenoiserBackend):
    """Text-conditioned toy denoiser over a (4, 8, 8) latent.

    The prompt embedding is mean-pooled over all 77 slots, so every token
    row influences the prediction and gradients reach each of them.
    """

    def __init__(self, seed: int = 0, text_dim: int = TOY_TEXT_DIM):
        self._schedule = ddpm_alphas_cumprod(TOY_T_MAX)
        self._net = _ConditioningHead(f"{seed}/denoiser/net", text_dim, TOY_LATENT_SHAPE)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return TOY_LATENT_SHAPE

    @property
    def t_max(self) -> int:
        return len(self._schedule) - 1

    @property
    def alphas_cumprod(self) -> np.ndarray:
        return self._schedule.copy()

    def predict_noise(self, noisy_latent: Any, t: int, prompt_emb: Any) -> Any:
        def embed(emb: torch.Tensor) -> torch.Tensor:
            if emb.shape != (MAX_TOKENS, self._net.w1.shape[1]):
                raise BackendError(
                    f"prompt embedding shape {tuple(emb.shape)} != ({MAX_TOKENS}, {self._net.w1.shape[1]})"
                )
            return self._net(emb.mean(dim=0))

        return self._dispatch(noisy_latent, t, prompt_emb, embed)

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        img = _as_float_image(image)
        if img.shape != (TOY_IMAGE_SIZE, TOY_IMAGE_SIZE, 3):
            raise BackendError(f"expected ({TOY_IMAGE_SIZE}, {TOY_IMAGE_SIZE}, 3) image, got {img.shape}")
        _, h, w = TOY_LATENT_SHAPE
        planes = [_block_mean(img[:, :, c], h) for c in range(3)]
        planes.append(img.mean(axis=2).reshape(h, TOY_IMAGE_SIZE // h, w, TOY_IMAGE_SIZE // w).mean(axis=(1, 3)))
        return 2.0 * np.stack(planes) - 1.0

    def decode_latent(self, latent: np.ndarray) -> np.ndarray:
        z = np.asarray(latent, dtype=np.float64)
        if z.shape != TOY_LATENT_SHAPE:
            raise BackendError(f"latent shape {z.shape} != {TOY_LATENT_SHAPE}")
        rgb = np.clip((z[:3] + 1.0) / 2.0, 0.0, 1.0)
        scale = TOY_IMAGE_SIZE // TOY_LATENT_SHAPE[1]
        return rgb.repeat(scale, axis=1).repeat(scale, axis=2).transpose(1, 2, 0)


class ToyControlDenoiser(_EpsilonFromCleanEstimate, ControlDenoiserBackend):
    """Depth-conditioned branch sharing the text denoiser's schedule."""

    def __init__(self, seed: int = 0):
        self._schedule = ddpm_alphas_cumprod(TOY_T_MAX)
        side = TOY_LATENT_SHAPE[1]
        self._side = side
        self._net = _ConditioningHead(f"{seed}/control/net", side * side, TOY_LATENT_SHAPE)

    def predict_noise(self, noisy_latent: Any, t: int, depth: Any) -> Any:
        def embed(d: torch.Tensor) -> torch.Tensor:
            pooled = _block_mean(d.detach().numpy(), self._side)
            h = torch.as_tensor(pooled.reshape(-1))
            return self._net(h)

        return self._dispatch(noisy_latent, t, depth, embed)


class ToyImageFeatures(ImageFeatureBackend):
    """Random-projection joint feature space over images and text."""

    def __init__(self, seed: int = 0, dim: int = TOY_FEATURE_DIM, text_dim: int = TOY_TEXT_DIM):
        self._seed = seed
        self._dim = dim
        self._text_dim = text_dim
        self._w_img = _weight(f"{seed}/features/img", (dim, 8 * 8 * 3))
        self._b_img = _key_rng(f"{seed}/features/img-bias").standard_normal(dim) * 0.1
        self._w_txt = _weight(f"{seed}/features/txt", (dim, text_dim))
        self._b_txt = _key_rng(f"{seed}/features/txt-bias").standard_normal(dim) * 0.1
        self._aes = _unit_vector(f"{seed}/features/aesthetic", dim)

    @property
    def feature_dim(self) -> int:
        return self._dim

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        img = _as_float_image(image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise BackendError(f"expected (H, W, 3) image, got {img.shape}")
        pooled = np.stack([_block_mean(img[:, :, c], 8) for c in range(3)])
        f = np.tanh(self._w_img @ pooled.reshape(-1) + self._b_img)
        return f / np.linalg.norm(f)

    def embed_text(self, text: str) -> np.ndarray:
        words = _simple_tokens(text)
        if not words:
            raise BackendError(f"text {text!r} contains no encodable tokens")
        h = np.mean(
            [_unit_vector(f"{self._seed}/features/word/{w}", self._text_dim) for w in words], axis=0
        )
        f = np.tanh(self._w_txt @ h + self._b_txt)
        return f / np.linalg.norm(f)

    def aesthetic_score(self, image: np.ndarray) -> float:
        return float(5.0 + 2.0 * np.tanh(self._aes @ self.embed_image(image)))


class ToySegmenter(SegmenterBackend):
    """Exact foreground rule for toy-synthesized images.

    ToyControlImage paints foregrounds with red above 0.45 and green below
    0.38 while backgrounds keep red at or below 0.40 and green at or above
    0.40; both survive the 8-bit round trip, so thresholding is lossless.
    """

    def segment(self, image: np.ndarray) -> np.ndarray:
        img = _as_float_image(image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise BackendError(f"expected (H, W, 3) image, got {img.shape}")
        fg = (img[:, :, 0] > _SEG_RED_MIN) & (img[:, :, 1] < _SEG_GREEN_MAX)
        return fg.astype(np.uint8)


class ToyControlImage(ControlImageBackend):
    """Flat-shaded foreground over bounded background noise.

    The output follows the depth mask exactly: pixels with positive depth
    get a per-prompt foreground color, everything else gets noise confined
    to the segmenter-safe background range.
    """

    def __init__(self, seed: int = 0):
        self._seed = seed

    def generate(
        self,
        depth: np.ndarray,
        prompt: str,
        *,
        control_strength: float,
        steps: int,
        seed: int,
    ) -> np.ndarray:
        d = np.asarray(depth, dtype=np.float64)
        if d.ndim != 2:
            raise BackendError(f"expected (H, W) depth, got {d.shape}")
        if steps < 1:
            raise BackendError("steps must be >= 1")
        h, w = d.shape
        rng = _key_rng(f"{self._seed}/ctrl-image/{seed}/{steps}/{prompt}")
        image = np.empty((h, w, 3))
        image[:, :, 0] = rng.uniform(0.0, _BG_RED_MAX, (h, w))
        image[:, :, 1] = rng.uniform(0.4, 1.0, (h, w))
        image[:, :, 2] = rng.uniform(0.4, 1.0, (h, w))
        jitter = _key_rng(f"{self._seed}/ctrl-image/color/{prompt}").uniform(-0.02, 0.02, 3)
        color = _FOREGROUND_BASE + jitter
        color[0] = np.clip(color[0] + 0.005 * (control_strength - 2.0), 0.70, 0.85)
        image[d > 0.0] = color
        return image


class ToyInpainter(InpainterBackend):
    """Blends background pixels toward fresh in-range noise; the foreground
    is returned bit-identical."""

    def __init__(self, seed: int = 0):
        self._seed = seed

    def inpaint(self, image: np.ndarray, foreground: np.ndarray, *, strength: float, seed: int) -> np.ndarray:
        img = _as_float_image(image)
        mask = np.asarray(foreground) > 0
        if img.ndim != 3 or img.shape[2] != 3:
            raise BackendError(f"expected (H, W, 3) image, got {img.shape}")
        if mask.shape != img.shape[:2]:
            raise BackendError(f"mask shape {mask.shape} != image plane {img.shape[:2]}")
        if not 0.0 <= strength <= 1.0:
            raise BackendError(f"strength must lie in [0, 1], got {strength}")
        h, w = mask.shape
        rng = _key_rng(f"{self._seed}/inpaint/{seed}")
        fresh = np.empty_like(img)
        fresh[:, :, 0] = rng.uniform(0.0, _BG_RED_MAX, (h, w))
        fresh[:, :, 1] = rng.uniform(0.4, 1.0, (h, w))
        fresh[:, :, 2] = rng.uniform(0.4, 1.0, (h, w))
        out = img.copy()
        out[~mask] = (1.0 - strength) * img[~mask] + strength * fresh[~mask]
        return out


def make_toy_suite(
    seed: int = 0, text_dim: int = TOY_TEXT_DIM, shape_dim: int = TOY_SHAPE_DIM
) -> BackendSuite:
    """Build the full deterministic toy suite from one integer seed."""
    return BackendSuite(
        kind="toy",
        text=ToyTextEncoder(seed, dim=text_dim),
        shape=ToyShapeEncoder(seed, dim=shape_dim),
        denoiser=ToyDenoiser(seed, text_dim=text_dim),
        control_denoiser=ToyControlDenoiser(seed),
        features=ToyImageFeatures(seed),
        segmenter=ToySegmenter(),
        control_image=ToyControlImage(seed),
        inpainter=ToyInpainter(seed),
    )
