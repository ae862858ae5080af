"""Point-cloud preprocessing and silhouette/depth rendering.

Conventions: clouds are (N, 3) float arrays in normalized object coordinates
(centroid at the origin, max radius 1). The world z axis is vertical; a view
at azimuth 0 and elevation 0 looks along +y, with screen x = world x and
screen y (up) = world z. Rendering is orthographic point splatting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "GeometryError",
    "PointCloud",
    "PatchSet",
    "ViewSpec",
    "farthest_point_sample",
    "normalize_cloud",
    "group_patches",
    "render_silhouette",
    "render_depth",
    "load_cloud",
    "save_cloud",
    "save_image_png",
    "load_image_png",
    "save_mask_png",
    "load_mask_png",
    "save_depth_png",
    "load_depth_png",
]


class GeometryError(ValueError):
    """Degenerate cloud or invalid geometric request."""


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (N, 3) float64
    source_id: str = ""

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise GeometryError(f"expected (N, 3) points with N >= 1, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise GeometryError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class PatchSet:
    centers: np.ndarray          # (P, 3)
    center_indices: np.ndarray   # (P,) indices into the source cloud
    groups: list[np.ndarray]     # P arrays of member point indices

    @property
    def num_patches(self) -> int:
        return len(self.groups)


@dataclass(frozen=True)
class ViewSpec:
    """Orthographic turntable view; azimuth is normalized into [0, 360)."""

    azimuth: float
    elevation: float = 0.0
    height: int = 224
    width: int = 224
    splat_radius: float = 2.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "azimuth", float(self.azimuth) % 360.0)
        if self.height < 1 or self.width < 1:
            raise GeometryError("image size must be positive")


def farthest_point_sample(cloud: PointCloud | np.ndarray, k: int, start_index: int = 0) -> np.ndarray:
    """Greedy max-min subset selection.

    Each selected point maximizes its squared Euclidean distance to the
    already-selected set; ties break toward the lowest index. Returns k
    distinct indices, the first being ``start_index``.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = pts.shape[0]
    if n == 0:
        raise GeometryError("empty cloud")
    if not (1 <= k <= n):
        raise GeometryError(f"k must satisfy 1 <= k <= {n}, got {k}")
    if not (0 <= start_index < n):
        raise GeometryError(f"start_index {start_index} out of range for {n} points")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start_index
    # min squared distance from every point to the chosen set
    best = np.sum((pts - pts[start_index]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(best))  # argmax returns the lowest tying index
        chosen[i] = nxt
        best = np.minimum(best, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return chosen


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Center the centroid at the origin and scale the max radius to 1."""
    pts = cloud.points - cloud.points.mean(axis=0)
    radius = float(np.linalg.norm(pts, axis=1).max())
    if radius <= 0.0:
        raise GeometryError("degenerate cloud: zero extent")
    return PointCloud(pts / radius, source_id=cloud.source_id)


def group_patches(cloud: PointCloud, num_patches: int = 64, group_size: int = 16) -> PatchSet:
    """Partition a cloud into FPS-seeded patches of nearest neighbors.

    Centers come from :func:`farthest_point_sample`; each group holds the
    ``group_size`` nearest cloud points to its center (ties by index).
    """
    n = len(cloud)
    if n < num_patches:
        raise GeometryError(f"need at least {num_patches} points, got {n}")
    if group_size < 1:
        raise GeometryError("group_size must be >= 1")
    group_size = min(group_size, n)
    center_idx = farthest_point_sample(cloud, num_patches)
    pts = cloud.points
    groups = []
    for ci in center_idx:
        d2 = np.sum((pts - pts[ci]) ** 2, axis=1)
        order = np.argsort(d2, kind="stable")
        groups.append(order[:group_size].astype(np.int64))
    return PatchSet(pts[center_idx].copy(), center_idx, groups)


def _view_rotation(azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    ca, sa = np.cos(az), np.sin(az)
    ce, se = np.cos(el), np.sin(el)
    # Spin the scene about vertical z, then tilt about screen x.
    rz = np.array([[ca, sa, 0.0], [-sa, ca, 0.0], [0.0, 0.0, 1.0]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, ce, se], [0.0, -se, ce]])
    return rx @ rz


def _project(cloud: PointCloud, view: ViewSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Screen-space splat centers (col, row) plus camera depth per point."""
    rotated = cloud.points @ _view_rotation(view.azimuth, view.elevation).T
    u, depth, v = rotated[:, 0], rotated[:, 1], rotated[:, 2]
    cols = (u + 1.0) / 2.0 * (view.width - 1)
    rows = (1.0 - v) / 2.0 * (view.height - 1)
    return cols, rows, depth


def _splat(view: ViewSpec, cols: np.ndarray, rows: np.ndarray, values: np.ndarray | None) -> np.ndarray:
    """Splat discs; returns a binary mask, or a per-pixel max of ``values``."""
    r = view.splat_radius
    if values is None:
        canvas = np.zeros((view.height, view.width), dtype=np.uint8)
    else:
        canvas = np.zeros((view.height, view.width), dtype=np.float64)
    for i in range(cols.shape[0]):
        cx, cy = cols[i], rows[i]
        x0 = max(int(np.ceil(cx - r)), 0)
        x1 = min(int(np.floor(cx + r)), view.width - 1)
        y0 = max(int(np.ceil(cy - r)), 0)
        y1 = min(int(np.floor(cy + r)), view.height - 1)
        if x1 < x0 or y1 < y0:
            continue
        xs = np.arange(x0, x1 + 1, dtype=np.float64)
        ys = np.arange(y0, y1 + 1, dtype=np.float64)
        inside = (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2 <= r * r
        if values is None:
            canvas[y0 : y1 + 1, x0 : x1 + 1] |= inside
        else:
            patch = canvas[y0 : y1 + 1, x0 : x1 + 1]
            np.maximum(patch, np.where(inside, values[i], 0.0), out=patch)
    return canvas


def render_silhouette(cloud: PointCloud, view: ViewSpec) -> np.ndarray:
    """Orthographic point-splat silhouette: (H, W) uint8 mask, foreground 1."""
    cols, rows, _ = _project(cloud, view)
    return _splat(view, cols, rows, None)


def render_depth(cloud: PointCloud, view: ViewSpec) -> np.ndarray:
    """Inverted-depth render: nearer points get larger values in (0, 1];
    background is exactly 0. Per-pixel nearest point wins."""
    cols, rows, depth = _project(cloud, view)
    # Normalized cloud depth sits in [-1, 1]; margins keep foreground > 0.
    inverted = (1.05 - depth) / 2.1
    return _splat(view, cols, rows, inverted)


def load_cloud(path: str | Path, source_id: str | None = None) -> PointCloud:
    """Read ``x y z`` triples (plain text) or a PLY vertex list."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    sid = source_id if source_id is not None else path.stem
    lines = text.splitlines()
    if lines and lines[0].strip().lower() == "ply":
        return PointCloud(_parse_ply(lines, path), source_id=sid)
    rows = []
    for lineno, line in enumerate(lines, 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if len(parts) < 3:
            raise GeometryError(f"{path}:{lineno}: expected 'x y z', got {stripped!r}")
        try:
            rows.append([float(parts[0]), float(parts[1]), float(parts[2])])
        except ValueError as exc:
            raise GeometryError(f"{path}:{lineno}: non-numeric coordinate") from exc
    if not rows:
        raise GeometryError(f"{path}: no points found")
    return PointCloud(np.array(rows, dtype=np.float64), source_id=sid)


def _parse_ply(lines: list[str], path: Path) -> np.ndarray:
    count = None
    body_at = None
    for i, line in enumerate(lines):
        parts = line.strip().split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts[:1] == ["format"] and parts[1] != "ascii":
            raise GeometryError(f"{path}: only ascii PLY is supported")
        elif parts[:1] == ["end_header"]:
            body_at = i + 1
            break
    if count is None or body_at is None:
        raise GeometryError(f"{path}: malformed PLY header")
    rows = []
    for line in lines[body_at : body_at + count]:
        parts = line.split()
        rows.append([float(parts[0]), float(parts[1]), float(parts[2])])
    if len(rows) != count:
        raise GeometryError(f"{path}: PLY vertex count mismatch")
    return np.array(rows, dtype=np.float64)


def save_cloud(cloud: PointCloud, path: str | Path) -> None:
    np.savetxt(path, cloud.points, fmt="%.9g")


def save_image_png(image: np.ndarray, path: str | Path) -> None:
    """Write an (H, W, 3) image in [0, 1] as 8-bit RGB PNG."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image_png(path: str | Path) -> np.ndarray:
    """Read an RGB PNG into float64 [0, 1]."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_mask_png(mask: np.ndarray, path: str | Path) -> None:
    """Write a binary mask as 8-bit single-channel PNG with values {0, 255}."""
    arr = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)


def load_mask_png(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr >= 128).astype(np.uint8)


def save_depth_png(depth: np.ndarray, path: str | Path) -> None:
    """Write a [0, 1] depth image as 16-bit single-channel PNG."""
    arr = np.clip(np.asarray(depth, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 65535.0).round().astype(np.uint16)).save(path)


def load_depth_png(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float64)
    return arr / 65535.0
