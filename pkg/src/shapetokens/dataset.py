"""Training-triplet construction: renders, prompt assignment, synthesis.

Each shape becomes 30 turntable views (12 degree azimuth steps at a fixed
elevation). Every view gets a random prompt from the bank and a synthesized
image whose foreground follows the view's depth render; backgrounds are then
partially rewritten by the inpainter. The result is a line-delimited manifest
of ``{shape_id, cloud_path, prompt, image_path, view_index}`` records.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from shapetokens.backends.base import BackendSuite, ControlImageBackend, InpainterBackend
from shapetokens.geometry import (
    PointCloud,
    ViewSpec,
    load_cloud,
    normalize_cloud,
    render_depth,
    render_silhouette,
    save_cloud,
    save_depth_png,
    save_image_png,
    save_mask_png,
)
from shapetokens.prompts import PromptBank, expand_template

__all__ = [
    "VIEW_COUNT",
    "AZIMUTH_STEP",
    "MANIFEST_FIELDS",
    "DatasetError",
    "RenderSet",
    "GenerationJob",
    "BuildResult",
    "category_of",
    "build_render_set",
    "assign_prompts",
    "synthesize_image",
    "write_manifest",
    "read_manifest",
    "validate_manifest",
    "build_dataset",
]

VIEW_COUNT = 30
AZIMUTH_STEP = 12.0
MANIFEST_FIELDS = ("shape_id", "cloud_path", "prompt", "image_path", "view_index")


class DatasetError(RuntimeError):
    """Dataset construction or manifest integrity failure."""


@dataclass(frozen=True)
class RenderSet:
    """All turntable renders of one shape."""

    shape_id: str
    views: tuple[ViewSpec, ...]
    silhouettes: tuple[np.ndarray, ...]
    depths: tuple[np.ndarray, ...]

    @property
    def azimuths(self) -> tuple[float, ...]:
        return tuple(v.azimuth for v in self.views)


@dataclass(frozen=True)
class GenerationJob:
    """One synthesis request: a depth render plus its prompt and knobs."""

    depth: np.ndarray
    prompt: str
    control_strength: float = 2.0
    steps: int = 50
    inpaint_strength: float = 0.5
    seed: int = 0
    job_id: str = ""


@dataclass(frozen=True)
class BuildResult:
    manifest_path: Path
    shape_ids: tuple[str, ...]
    record_count: int


def category_of(shape_id: str) -> str:
    """Category word of a shape id: its longest leading run of letters.

    ``chair_001`` and ``chair42`` both map to ``chair``.
    """
    match = re.match(r"[A-Za-z]+", shape_id)
    if not match:
        raise DatasetError(f"shape id {shape_id!r} has no leading category word")
    return match.group(0).lower()


def build_render_set(
    cloud: PointCloud, elevation: float = 0.0, image_size: int = 64
) -> RenderSet:
    """Render the 30-view turntable (silhouette and inverted depth per view)."""
    views = tuple(
        ViewSpec(azimuth=AZIMUTH_STEP * i, elevation=elevation,
                 height=image_size, width=image_size)
        for i in range(VIEW_COUNT)
    )
    silhouettes = tuple(render_silhouette(cloud, v) for v in views)
    depths = tuple(render_depth(cloud, v) for v in views)
    return RenderSet(cloud.source_id, views, silhouettes, depths)


def assign_prompts(
    render_set: RenderSet, bank: PromptBank | Sequence[str], rng: np.random.Generator
) -> tuple[str, ...]:
    """Pick one bank entry per view, uniformly under the caller's generator."""
    prompts = bank.prompts if isinstance(bank, PromptBank) else tuple(bank)
    if not prompts:
        raise DatasetError("prompt bank is empty")
    picks = rng.integers(0, len(prompts), size=len(render_set.views))
    return tuple(prompts[i] for i in picks)


def synthesize_image(
    job: GenerationJob, generator: ControlImageBackend, inpainter: InpainterBackend
) -> np.ndarray:
    """Run the depth-conditioned generator, then rewrite the background.

    The foreground region (positive depth) survives both stages untouched;
    inpaint strength 0 leaves the background untouched as well.
    """
    label = job.job_id or "<unnamed job>"
    try:
        image = generator.generate(
            job.depth,
            job.prompt,
            control_strength=job.control_strength,
            steps=job.steps,
            seed=job.seed,
        )
        foreground = (np.asarray(job.depth) > 0.0).astype(np.uint8)
        return inpainter.inpaint(
            image, foreground, strength=job.inpaint_strength, seed=job.seed
        )
    except Exception as exc:
        raise DatasetError(f"synthesis failed for job {label}: {exc}") from exc


def write_manifest(records: Iterable[Mapping[str, object]], path: str | Path) -> None:
    """Write line-delimited records, refusing incomplete ones."""
    path = Path(path)
    lines = []
    for i, record in enumerate(records):
        missing = [f for f in MANIFEST_FIELDS if f not in record]
        if missing:
            raise DatasetError(f"record {i} is missing fields {missing}")
        lines.append(json.dumps({f: record[f] for f in MANIFEST_FIELDS}, sort_keys=True))
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_manifest(path: str | Path) -> list[dict]:
    """Parse a manifest strictly; any malformed line raises with its number."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest {path} does not exist")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{lineno}: malformed record: {exc}") from exc
        missing = [f for f in MANIFEST_FIELDS if f not in record]
        if missing:
            raise DatasetError(f"{path}:{lineno}: missing fields {missing}")
        records.append(record)
    return records


def validate_manifest(path: str | Path) -> list[str]:
    """Check structure and asset reachability; returns all problems found."""
    path = Path(path)
    if not path.is_file():
        return [f"manifest {path} does not exist"]
    errors: list[str] = []
    root = path.parent
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            errors.append(f"line {lineno}: malformed record: {exc}")
            continue
        missing = [f for f in MANIFEST_FIELDS if f not in record]
        if missing:
            errors.append(f"line {lineno}: missing fields {missing}")
            continue
        if not isinstance(record["view_index"], int) or record["view_index"] < 0:
            errors.append(f"line {lineno}: view_index must be a nonnegative integer")
        if not str(record["prompt"]).strip():
            errors.append(f"line {lineno}: empty prompt")
        for key in ("cloud_path", "image_path"):
            asset = Path(record[key])
            if not asset.is_absolute():
                asset = root / asset
            if not asset.is_file():
                errors.append(f"line {lineno}: missing asset {record[key]} ({key})")
    return errors


def _discover_shapes(shapes_dir: Path) -> list[Path]:
    files = sorted(
        p for p in shapes_dir.iterdir()
        if p.suffix.lower() in {".xyz", ".txt", ".ply"} and p.is_file()
    )
    if not files:
        raise DatasetError(f"no point-cloud files (*.xyz, *.txt, *.ply) in {shapes_dir}")
    return files


def build_dataset(
    shapes_dir: str | Path,
    bank: PromptBank | Sequence[str],
    out_dir: str | Path,
    suite: BackendSuite,
    *,
    elevation: float = 0.0,
    image_size: int = 64,
    seed: int = 0,
    control_strength: float = 2.0,
    steps: int = 50,
    inpaint_strength: float = 0.5,
) -> BuildResult:
    """Render, assign, synthesize, and write one manifest for a shape folder.

    Shape files are discovered in sorted order so a fixed seed reproduces the
    dataset bit for bit. Outputs land under ``out_dir`` in ``clouds/``,
    ``images/``, ``depth/``, and ``masks/``, with relative paths in the
    manifest.
    """
    shapes_dir = Path(shapes_dir)
    out_dir = Path(out_dir)
    for sub in ("clouds", "images", "depth", "masks"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    records: list[dict] = []
    shape_ids: list[str] = []
    for shape_idx, path in enumerate(_discover_shapes(shapes_dir)):
        cloud = normalize_cloud(load_cloud(path))
        shape_id = cloud.source_id
        category = category_of(shape_id)
        shape_ids.append(shape_id)
        cloud_rel = Path("clouds") / f"{shape_id}.xyz"
        save_cloud(cloud, out_dir / cloud_rel)
        renders = build_render_set(cloud, elevation=elevation, image_size=image_size)
        rng = np.random.default_rng([seed, shape_idx])
        templates = assign_prompts(renders, bank, rng)
        for view_idx, template in enumerate(templates):
            prompt = expand_template(template, category)
            job = GenerationJob(
                depth=renders.depths[view_idx],
                prompt=prompt,
                control_strength=control_strength,
                steps=steps,
                inpaint_strength=inpaint_strength,
                seed=(seed * 1000003 + shape_idx) * 1000003 + view_idx,
                job_id=f"{shape_id}/view{view_idx:02d}",
            )
            image = synthesize_image(job, suite.control_image, suite.inpainter)
            image_rel = Path("images") / f"{shape_id}_{view_idx:02d}.png"
            save_image_png(image, out_dir / image_rel)
            save_depth_png(renders.depths[view_idx], out_dir / "depth" / f"{shape_id}_{view_idx:02d}.png")
            save_mask_png(renders.silhouettes[view_idx], out_dir / "masks" / f"{shape_id}_{view_idx:02d}.png")
            records.append({
                "shape_id": shape_id,
                "cloud_path": str(cloud_rel),
                "prompt": prompt,
                "image_path": str(image_rel),
                "view_index": view_idx,
            })
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(records, manifest_path)
    return BuildResult(manifest_path, tuple(shape_ids), len(records))
