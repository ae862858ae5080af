"""Shape asset registry: id -> cloud file, category label, token cache.

Encoding a cloud is the slow step of a generation request, so the registry
memoizes shape tokens per encoder. Cached tokens are validated against the
encoder's declared dimensions and recomputed on mismatch (e.g. after a
backend swap), never served stale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from threading import Lock

import numpy as np

from shapetokens.backends.base import ShapeEncoderBackend
from shapetokens.dataset import category_of
from shapetokens.geometry import PointCloud, load_cloud, normalize_cloud

__all__ = ["RegistryError", "ShapeEntry", "ShapeRegistry"]

CLOUD_SUFFIXES = (".xyz", ".ply")


class RegistryError(KeyError):
    """Unknown shape id or malformed registry source."""


@dataclass(frozen=True)
class ShapeEntry:
    shape_id: str
    cloud_path: Path
    category: str


@dataclass
class ShapeRegistry:
    entries: dict[str, ShapeEntry] = field(default_factory=dict)
    _token_cache: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    _lock: Lock = field(default_factory=Lock, repr=False)

    @classmethod
    def from_dir(cls, root: str | Path) -> "ShapeRegistry":
        """Scan a directory for cloud files; ids are file stems."""
        root = Path(root)
        if not root.is_dir():
            raise RegistryError(f"shape directory not found: {root}")
        entries: dict[str, ShapeEntry] = {}
        for path in sorted(root.iterdir()):
            if path.suffix.lower() not in CLOUD_SUFFIXES:
                continue
            shape_id = path.stem
            if shape_id in entries:
                raise RegistryError(f"duplicate shape id {shape_id!r}")
            entries[shape_id] = ShapeEntry(shape_id, path, category_of(shape_id))
        if not entries:
            raise RegistryError(f"no cloud files ({'/'.join(CLOUD_SUFFIXES)}) under {root}")
        return cls(entries)

    def ids(self) -> list[str]:
        return sorted(self.entries)

    def get(self, shape_id: str) -> ShapeEntry:
        try:
            return self.entries[shape_id]
        except KeyError:
            raise RegistryError(f"unknown shape id {shape_id!r}") from None

    def load_cloud(self, shape_id: str) -> PointCloud:
        """Normalized cloud for ``shape_id`` (unit-sphere frame)."""
        return normalize_cloud(load_cloud(self.get(shape_id).cloud_path))

    def is_cached(self, shape_id: str) -> bool:
        with self._lock:
            return shape_id in self._token_cache

    def tokens(self, shape_id: str, encoder: ShapeEncoderBackend) -> np.ndarray:
        """Shape tokens, memoized; recomputed when cached dims disagree."""
        with self._lock:
            cached = self._token_cache.get(shape_id)
            if cached is not None and cached.shape == (encoder.token_count, encoder.shape_dim):
                return cached
        tokens = encoder.encode(self.load_cloud(shape_id).points)
        with self._lock:
            self._token_cache[shape_id] = tokens
        return tokens
