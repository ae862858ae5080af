from __future__ import annotations

import json

import numpy as np
import pytest

from shapetokens.dataset import (
    AZIMUTH_STEP,
    MANIFEST_FIELDS,
    VIEW_COUNT,
    DatasetError,
    GenerationJob,
    assign_prompts,
    build_dataset,
    build_render_set,
    category_of,
    read_manifest,
    synthesize_image,
    validate_manifest,
    write_manifest,
)
from shapetokens.geometry import load_cloud, normalize_cloud

from conftest import TRAIN_BANK


class TestCategory:
    def test_leading_letter_run(self):
        assert category_of("ball_01") == "ball"
        assert category_of("Chair42") == "chair"
        assert category_of("fireHydrant_3") == "firehydrant"

    def test_no_letters_rejected(self):
        with pytest.raises(DatasetError):
            category_of("007")


class TestRenderSet:
    def test_turntable_layout(self, shape_dir):
        cloud = normalize_cloud(load_cloud(shape_dir / "ball_01.xyz"))
        renders = build_render_set(cloud, image_size=32)
        assert len(renders.views) == VIEW_COUNT
        assert renders.azimuths == tuple((AZIMUTH_STEP * i) % 360 for i in range(VIEW_COUNT))
        assert renders.shape_id == "ball_01"
        for sil, depth in zip(renders.silhouettes, renders.depths):
            assert sil.shape == (32, 32)
            assert np.isin(sil, (0, 1)).all()
            assert (depth[sil == 0] == 0.0).all()


class TestAssignPrompts:
    def test_reproducible_under_seeded_rng(self, shape_dir):
        cloud = normalize_cloud(load_cloud(shape_dir / "ball_01.xyz"))
        renders = build_render_set(cloud, image_size=16)
        a = assign_prompts(renders, TRAIN_BANK, np.random.default_rng(3))
        b = assign_prompts(renders, TRAIN_BANK, np.random.default_rng(3))
        assert a == b
        assert len(a) == VIEW_COUNT
        assert set(a) <= set(TRAIN_BANK)

    def test_empty_bank_rejected(self, shape_dir):
        cloud = normalize_cloud(load_cloud(shape_dir / "ball_01.xyz"))
        renders = build_render_set(cloud, image_size=16)
        with pytest.raises(DatasetError):
            assign_prompts(renders, [], np.random.default_rng(0))


class TestSynthesize:
    def test_foreground_survives_both_stages(self, toy_suite):
        depth = np.zeros((32, 32))
        depth[10:20, 10:20] = 0.6
        job = GenerationJob(depth=depth, prompt="a photo of a ball", seed=4)
        final = synthesize_image(job, toy_suite.control_image, toy_suite.inpainter)
        direct = toy_suite.control_image.generate(
            depth, job.prompt, control_strength=job.control_strength,
            steps=job.steps, seed=job.seed,
        )
        fg = depth > 0
        assert np.array_equal(final[fg], direct[fg])
        assert not np.array_equal(final[~fg], direct[~fg])

    def test_failures_carry_the_job_id(self, toy_suite):
        job = GenerationJob(depth=np.zeros((8, 8)), prompt="a ball",
                            steps=0, job_id="ball_01/view03")
        with pytest.raises(DatasetError, match="ball_01/view03"):
            synthesize_image(job, toy_suite.control_image, toy_suite.inpainter)


class TestManifestIO:
    def _record(self, i=0):
        return {
            "shape_id": "ball_01",
            "cloud_path": "clouds/ball_01.xyz",
            "prompt": "a photo of a ball",
            "image_path": f"images/ball_01_{i:02d}.png",
            "view_index": i,
        }

    def test_round_trip(self, tmp_path):
        path = tmp_path / "manifest.jsonl"
        records = [self._record(i) for i in range(3)]
        write_manifest(records, path)
        assert read_manifest(path) == records

    def test_write_rejects_incomplete_records(self, tmp_path):
        bad = self._record()
        del bad["prompt"]
        with pytest.raises(DatasetError):
            write_manifest([bad], tmp_path / "m.jsonl")

    def test_read_reports_line_numbers(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(json.dumps(self._record()) + "\nnot json\n")
        with pytest.raises(DatasetError, match=":2"):
            read_manifest(path)

    def test_read_missing_fields(self, tmp_path):
        path = tmp_path / "m.jsonl"
        incomplete = {k: v for k, v in self._record().items() if k != "view_index"}
        path.write_text(json.dumps(incomplete) + "\n")
        with pytest.raises(DatasetError, match="view_index"):
            read_manifest(path)

    def test_read_missing_file(self, tmp_path):
        with pytest.raises(DatasetError):
            read_manifest(tmp_path / "nope.jsonl")


class TestValidateManifest:
    def test_clean_build_validates(self, tiny_dataset):
        assert validate_manifest(tiny_dataset) == []

    def test_detects_missing_asset_and_bad_fields(self, tmp_path):
        record = {
            "shape_id": "ball_01",
            "cloud_path": "clouds/ball_01.xyz",
            "prompt": " ",
            "image_path": "images/gone.png",
            "view_index": -1,
        }
        path = tmp_path / "m.jsonl"
        path.write_text(json.dumps(record) + "\n")
        problems = validate_manifest(path)
        joined = "\n".join(problems)
        assert "view_index" in joined
        assert "empty prompt" in joined
        assert "missing asset" in joined


class TestBuildDataset:
    def test_layout_counts_and_determinism(self, shape_dir, toy_suite, tmp_path):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        result_a = build_dataset(shape_dir, list(TRAIN_BANK), out_a, toy_suite, seed=0)
        result_b = build_dataset(shape_dir, list(TRAIN_BANK), out_b, toy_suite, seed=0)
        assert result_a.record_count == 2 * VIEW_COUNT
        assert result_a.shape_ids == ("ball_01", "pole_01")
        for sub in ("clouds", "images", "depth", "masks"):
            assert (out_a / sub).is_dir()
        assert result_a.manifest_path.read_text() == result_b.manifest_path.read_text()
        img = "images/ball_01_00.png"
        assert (out_a / img).read_bytes() == (out_b / img).read_bytes()

    def test_prompts_expand_to_categories(self, tiny_dataset):
        records = read_manifest(tiny_dataset)
        assert len(records) == 2 * VIEW_COUNT
        for record in records:
            category = category_of(record["shape_id"])
            assert category in record["prompt"]
            assert "[SHAPE-ID]" not in record["prompt"]
            assert 0 <= record["view_index"] < VIEW_COUNT
        assert set(MANIFEST_FIELDS) == set(records[0].keys())

    def test_seed_changes_output(self, shape_dir, toy_suite, tmp_path):
        out = tmp_path / "seeded"
        result = build_dataset(shape_dir, list(TRAIN_BANK), out, toy_suite, seed=1)
        base = read_manifest(result.manifest_path)
        other = read_manifest(
            build_dataset(shape_dir, list(TRAIN_BANK), tmp_path / "s2", toy_suite, seed=2).manifest_path
        )
        assert [r["prompt"] for r in base] != [r["prompt"] for r in other]

    def test_empty_shape_dir_rejected(self, toy_suite, tmp_path):
        empty = tmp_path / "shapes"
        empty.mkdir()
        with pytest.raises(DatasetError):
            build_dataset(empty, list(TRAIN_BANK), tmp_path / "out", toy_suite)
