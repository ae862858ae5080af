"""Contracts for the pretrained-model seams of the pipeline.

Every heavyweight model (text encoder, point-cloud encoder, denoiser,
feature extractor, segmenter, depth-conditioned generator, inpainter) sits
behind one of these interfaces. The toy suite implements all of them
deterministically at desk scale; external adapters wrap real checkpoints.
All backends are immutable after construction and safe to call from
multiple threads of control.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import numpy as np

if TYPE_CHECKING:
    from shapetokens.prompts import TokenLayout

__all__ = [
    "MAX_TOKENS",
    "SHAPE_TOKEN_COUNT",
    "BackendError",
    "DimensionMismatchError",
    "TextEncoderBackend",
    "ShapeEncoderBackend",
    "DenoiserBackend",
    "ControlDenoiserBackend",
    "ImageFeatureBackend",
    "SegmenterBackend",
    "ControlImageBackend",
    "InpainterBackend",
    "BackendSuite",
    "ddpm_alphas_cumprod",
]

# Prompt embeddings always span 77 token slots; shape encoders emit 64 patch
# tokens plus one class token.
MAX_TOKENS = 77
SHAPE_TOKEN_COUNT = 65


class BackendError(RuntimeError):
    """A backend could not be loaded or failed during inference."""


class DimensionMismatchError(BackendError):
    """Declared dimensions disagree with what the model actually produces."""


class TextEncoderBackend(ABC):
    """Maps prompt text to a fixed 77-row token-embedding matrix."""

    max_tokens: int = MAX_TOKENS
    # Slot index of the first content token (slot 0 is the begin marker).
    content_offset: int = 1

    @property
    @abstractmethod
    def embed_dim(self) -> int:
        """Width of one token embedding."""

    @abstractmethod
    def encode(self, text: str) -> tuple[np.ndarray, "TokenLayout"]:
        """Encode ``text`` into a (77, embed_dim) matrix plus its token layout.

        Deterministic for a fixed input. The layout's shape span is not yet
        located here; see :func:`shapetokens.prompts.encode_prompt`.
        """

    @abstractmethod
    def tokenize(self, text: str) -> list[str]:
        """Content tokens of ``text`` in slot order; token i sits at slot
        ``content_offset + i``."""


class ShapeEncoderBackend(ABC):
    """Maps a point cloud to 65 shape tokens (64 patches + 1 class token)."""

    token_count: int = SHAPE_TOKEN_COUNT

    @property
    @abstractmethod
    def shape_dim(self) -> int:
        """Width of one shape token."""

    @abstractmethod
    def encode(self, points: np.ndarray) -> np.ndarray:
        """Encode an (N, 3) cloud into a (65, shape_dim) token matrix."""


class DenoiserBackend(ABC):
    """Latent diffusion denoiser conditioned on a prompt embedding."""

    @property
    @abstractmethod
    def latent_shape(self) -> tuple[int, int, int]:
        """(channels, height, width) of the latent space."""

    @property
    @abstractmethod
    def t_max(self) -> int:
        """Number of diffusion timesteps; t runs over 1..t_max."""

    @property
    @abstractmethod
    def alphas_cumprod(self) -> np.ndarray:
        """Noise schedule, length t_max+1 with entry 0 fixed at 1.0 and the
        rest strictly decreasing within (0, 1)."""

    @abstractmethod
    def predict_noise(self, noisy_latent: Any, t: int, prompt_emb: Any) -> Any:
        """Predict the noise component of ``noisy_latent`` at timestep ``t``.

        Accepts numpy arrays (inference) or torch tensors (training, in which
        case the output stays differentiable w.r.t. ``prompt_emb``). Output
        shape equals ``latent_shape``.
        """

    @abstractmethod
    def encode_image(self, image: np.ndarray) -> np.ndarray:
        """Map an (H, W, 3) image in [0, 1] to a clean latent."""

    @abstractmethod
    def decode_latent(self, latent: np.ndarray) -> np.ndarray:
        """Map a latent back to an (H, W, 3) image in [0, 1]."""


class ControlDenoiserBackend(ABC):
    """Step-level denoiser branch conditioned on a depth image instead of text."""

    @abstractmethod
    def predict_noise(self, noisy_latent: np.ndarray, t: int, depth: np.ndarray) -> np.ndarray:
        """Predict noise under depth conditioning; output matches the latent shape."""


class ImageFeatureBackend(ABC):
    """Joint image/text feature space for similarity and distribution metrics."""

    @property
    @abstractmethod
    def feature_dim(self) -> int: ...

    @abstractmethod
    def embed_image(self, image: np.ndarray) -> np.ndarray:
        """(H, W, 3) image in [0, 1] -> (feature_dim,) vector."""

    @abstractmethod
    def embed_text(self, text: str) -> np.ndarray:
        """Text -> (feature_dim,) vector."""

    def aesthetic_score(self, image: np.ndarray) -> float:
        """Scalar aesthetic rating in [0, 10]. Optional: backends without a
        rating model leave this unimplemented and reports omit the column."""
        raise NotImplementedError


class SegmenterBackend(ABC):
    """Foreground detection: image -> binary mask (H, W), foreground = 1."""

    @abstractmethod
    def segment(self, image: np.ndarray) -> np.ndarray: ...


class ControlImageBackend(ABC):
    """Whole-image depth-conditioned generator used for dataset synthesis."""

    @abstractmethod
    def generate(
        self,
        depth: np.ndarray,
        prompt: str,
        *,
        control_strength: float,
        steps: int,
        seed: int,
    ) -> np.ndarray:
        """Produce an (H, W, 3) image in [0, 1] whose foreground follows ``depth``."""


class InpainterBackend(ABC):
    """Background rewriter that preserves the foreground mask exactly."""

    @abstractmethod
    def inpaint(
        self, image: np.ndarray, foreground: np.ndarray, *, strength: float, seed: int
    ) -> np.ndarray: ...


@dataclass(frozen=True)
class BackendSuite:
    """One loaded implementation of every backend contract."""

    kind: str
    text: TextEncoderBackend
    shape: ShapeEncoderBackend
    denoiser: DenoiserBackend
    control_denoiser: ControlDenoiserBackend
    features: ImageFeatureBackend
    segmenter: SegmenterBackend
    control_image: ControlImageBackend
    inpainter: InpainterBackend


def ddpm_alphas_cumprod(t_max: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> np.ndarray:
    """Cumulative product schedule over betas linear in t.

    Returns an array of length ``t_max + 1``; entry 0 is 1.0 (clean signal)
    and entries 1..t_max decrease strictly within (0, 1).
    """
    if t_max < 1:
        raise ValueError(f"t_max must be >= 1, got {t_max}")
    betas = np.linspace(beta_start, beta_end, t_max, dtype=np.float64)
    out = np.empty(t_max + 1, dtype=np.float64)
    out[0] = 1.0
    out[1:] = np.cumprod(1.0 - betas)
    return out
