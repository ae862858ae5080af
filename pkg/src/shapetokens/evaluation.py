"""Quantitative metrics: silhouette adherence over turntable views, prompt
similarity, and feature-distribution distances, plus report assembly.

Silhouette metrics compare a rendered reference mask against a segmentation
of the generated image. Chamfer operates on 8-connected boundary pixels and
is normalized by the image diagonal so values are comparable across
resolutions. Distribution metrics use whatever joint feature space the
backend suite provides.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from shapetokens.backends.base import ImageFeatureBackend, SegmenterBackend
from shapetokens.geometry import PointCloud, ViewSpec, render_silhouette

__all__ = [
    "EvaluationError",
    "MaskPair",
    "AdherenceResult",
    "MetricsReport",
    "DEFAULT_VIEWS",
    "mask_boundary",
    "silhouette_iou",
    "silhouette_chamfer",
    "multiview_adherence",
    "clip_score",
    "frechet_distance",
    "kernel_distance",
    "assemble_report",
]

# Six uniform turntable azimuths, 60 degrees apart starting at 0.
DEFAULT_VIEWS = (0.0, 60.0, 120.0, 180.0, 240.0, 300.0)


class EvaluationError(ValueError):
    """Metric inputs are degenerate or inconsistent."""


@dataclass(frozen=True)
class MaskPair:
    """Reference and generated binary masks on a common grid."""

    reference: np.ndarray
    generated: np.ndarray

    def __post_init__(self) -> None:
        ref = np.asarray(self.reference)
        gen = np.asarray(self.generated)
        if ref.shape != gen.shape or ref.ndim != 2:
            raise EvaluationError(
                f"masks must share one 2-D shape, got {ref.shape} and {gen.shape}"
            )
        for name, m in (("reference", ref), ("generated", gen)):
            if not np.isin(m, (0, 1)).all():
                raise EvaluationError(f"{name} mask must be binary")
        object.__setattr__(self, "reference", ref.astype(bool))
        object.__setattr__(self, "generated", gen.astype(bool))


def silhouette_iou(pair: MaskPair) -> float:
    """Intersection over union of the two foregrounds, in [0, 1]."""
    union = int(np.logical_or(pair.reference, pair.generated).sum())
    if union == 0:
        raise EvaluationError("IoU undefined: both masks are empty")
    inter = int(np.logical_and(pair.reference, pair.generated).sum())
    return inter / union


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """(n, 2) row/col coordinates of foreground pixels with a background
    pixel among their 8 neighbours (frame edges count as background)."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = np.ones_like(m)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            shifted = padded[1 + dr : 1 + dr + m.shape[0], 1 + dc : 1 + dc + m.shape[1]]
            interior &= shifted
    return np.argwhere(m & ~interior)


def silhouette_chamfer(pair: MaskPair) -> float:
    """Symmetric mean nearest-neighbour distance between the two mask
    boundaries, divided by the image diagonal."""
    a = mask_boundary(pair.reference).astype(np.float64)
    b = mask_boundary(pair.generated).astype(np.float64)
    if len(a) == 0 or len(b) == 0:
        raise EvaluationError("Chamfer undefined: a mask has no boundary pixels")
    # Pairwise distances are fine at mask scale (boundaries, not areas).
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    forward = np.sqrt(d2.min(axis=1)).mean()
    backward = np.sqrt(d2.min(axis=0)).mean()
    h, w = pair.reference.shape
    return float((forward + backward) / 2.0 / math.hypot(h, w))


@dataclass(frozen=True)
class AdherenceResult:
    mean_iou: float
    mean_chamfer: float
    views_used: int
    exclusions: int
    failures: tuple[str, ...] = ()


def multiview_adherence(
    cloud: PointCloud,
    generator: Callable[[ViewSpec], np.ndarray],
    segmenter: SegmenterBackend,
    azimuths: Sequence[float] = DEFAULT_VIEWS,
    *,
    height: int = 64,
    width: int = 64,
) -> AdherenceResult:
    """Render, generate, segment, and score each turntable view.

    A view whose generation or segmentation raises is excluded from the
    means and recorded; at least one view must survive.
    """
    ious: list[float] = []
    chamfers: list[float] = []
    failures: list[str] = []
    for az in azimuths:
        view = ViewSpec(az, height=height, width=width)
        reference = render_silhouette(cloud, view)
        try:
            image = generator(view)
            predicted = segmenter.segment(np.asarray(image))
            pair = MaskPair(reference, predicted)
            ious.append(silhouette_iou(pair))
            chamfers.append(silhouette_chamfer(pair))
        except Exception as exc:  # noqa: BLE001 - per-view isolation is the contract
            failures.append(f"azimuth {az:g}: {exc}")
    if not ious:
        raise EvaluationError(f"every view failed: {failures}")
    return AdherenceResult(
        mean_iou=float(np.mean(ious)),
        mean_chamfer=float(np.mean(chamfers)),
        views_used=len(ious),
        exclusions=len(failures),
        failures=tuple(failures),
    )


def clip_score(features: ImageFeatureBackend, image: np.ndarray, text: str) -> float:
    """100 x cosine similarity between image and text features."""
    img_vec = np.asarray(features.embed_image(np.asarray(image)), dtype=np.float64)
    txt_vec = np.asarray(features.embed_text(text), dtype=np.float64)
    ni, nt = np.linalg.norm(img_vec), np.linalg.norm(txt_vec)
    if ni == 0.0 or nt == 0.0:
        raise EvaluationError("zero-norm feature vector")
    return float(100.0 * (img_vec @ txt_vec) / (ni * nt))


def _check_features(name: str, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise EvaluationError(f"{name} must be (n >= 2, d), got {x.shape}")
    if not np.isfinite(x).all():
        raise EvaluationError(f"{name} contains non-finite values")
    return x


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Matrix square root via eigendecomposition of the symmetrized input.

    Tiny negative eigenvalues from round-off are clamped to zero.
    """
    sym = (matrix + matrix.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: np.ndarray, b: np.ndarray, eps: float = 1e-6) -> float:
    """Gaussian-moment distance between two feature sets.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), with ``eps`` added
    to the covariance diagonals to keep desk-scale sets non-singular. The
    product's square root is computed as A^(1/2) (A^(1/2) B A^(1/2))^(1/2)
    A^(-1/2) traced, which needs only symmetric square roots.
    """
    a = _check_features("a", a)
    b = _check_features("b", b)
    if a.shape[1] != b.shape[1]:
        raise EvaluationError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False) + eps * np.eye(a.shape[1])
    cov_b = np.cov(b, rowvar=False) + eps * np.eye(b.shape[1])
    root_a = _psd_sqrt(cov_a)
    # Tr((S_a S_b)^(1/2)) equals Tr((A^(1/2) B A^(1/2))^(1/2)) for PSD inputs.
    middle = _psd_sqrt(root_a @ cov_b @ root_a)
    mean_term = float(((mu_a - mu_b) ** 2).sum())
    value = mean_term + float(np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(middle))
    return max(value, 0.0)


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def kernel_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Unbiased squared MMD with a cubic polynomial kernel, times 100.

    The unbiased estimator omits the diagonal of the within-set kernel
    sums, so identical sets can report slightly negative values.
    """
    a = _check_features("a", a)
    b = _check_features("b", b)
    if a.shape[1] != b.shape[1]:
        raise EvaluationError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    n, m = a.shape[0], b.shape[0]
    kaa = _poly_kernel(a, a)
    kbb = _poly_kernel(b, b)
    kab = _poly_kernel(a, b)
    term_a = (kaa.sum() - np.trace(kaa)) / (n * (n - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (m * (m - 1))
    term_ab = 2.0 * kab.mean()
    return float(100.0 * (term_a + term_b - term_ab))


@dataclass(frozen=True)
class MetricsReport:
    """Aggregated metric rows plus their means; serializable to JSON."""

    rows: tuple[dict, ...]
    summary: dict
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"summary": self.summary, "metadata": self.metadata, "rows": list(self.rows)},
            indent=2,
            sort_keys=True,
        )


_SUMMARY_KEYS = ("s_iou", "s_cd", "clip", "fid", "kid", "aes")
_META_KEYS = ("lambda", "strategy", "handoff_k", "seed")


def assemble_report(
    runs: Sequence[Mapping[str, object]],
    out_path: str | Path | None = None,
) -> MetricsReport:
    """Aggregate per-run metric records into one report.

    Every run may carry any subset of the summary metrics; means are taken
    over the runs that report each key. Run metadata (guidance strength,
    strategy, handoff K, seed) must agree across runs where present.
    """
    if not runs:
        raise EvaluationError("cannot assemble a report from zero runs")
    rows = []
    metadata: dict = {}
    for i, run in enumerate(runs):
        row = dict(run)
        for key in _META_KEYS:
            if key not in row:
                continue
            if key in metadata and metadata[key] != row[key]:
                raise EvaluationError(
                    f"run {i} metadata {key}={row[key]!r} conflicts with {metadata[key]!r}"
                )
            metadata[key] = row[key]
        rows.append(row)
    summary = {}
    for key in _SUMMARY_KEYS:
        values = [float(row[key]) for row in rows if key in row and row[key] is not None]
        if values:
            summary[key] = float(np.mean(values))
    report = MetricsReport(rows=tuple(rows), summary=summary, metadata=metadata)
    if out_path is not None:
        Path(out_path).write_text(report.to_json(), encoding="utf-8")
    return report
