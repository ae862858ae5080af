from __future__ import annotations

import base64
import threading
import time

import pytest
import torch
from fastapi.testclient import TestClient

from shapetokens.registry import ShapeRegistry
from shapetokens.residual import init_params
from shapetokens.service import ServiceState, WorkSlots, create_app

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
TEMPLATE = "a photograph of a [SHAPE-ID]"


def live_params():
    params = init_params(16, 8, 16, 32, seed=0)
    gen = torch.Generator().manual_seed(3)
    params.final_weight.data = torch.randn(16, 16, generator=gen) * 0.3
    return params


@pytest.fixture()
def service(shape_dir, toy_suite, tmp_path):
    state = ServiceState(
        suite=toy_suite,
        params=live_params(),
        registry=ShapeRegistry.from_dir(shape_dir),
        runs_dir=tmp_path / "runs",
        slots=WorkSlots(2),
    )
    with TestClient(create_app(state)) as client:
        yield client, state


def generate_payload(**overrides):
    payload = {"shape_id": "ball_01", "prompt_template": TEMPLATE,
               "lambda": 1.0, "seed": 0, "steps": 8}
    payload.update(overrides)
    return payload


class TestWorkSlots:
    def test_acquire_release_cycle(self):
        slots = WorkSlots(2)
        assert slots.try_acquire()
        assert slots.try_acquire()
        assert not slots.try_acquire()
        slots.release()
        assert slots.try_acquire()

    def test_needs_at_least_one(self):
        with pytest.raises(ValueError):
            WorkSlots(0)


class TestHealthAndLoading:
    def test_ready_service_reports_backend(self, service):
        client, _ = service
        response = client.get("/health")
        assert response.status_code == 200
        assert response.json() == {"status": "ok", "backend": "toy"}

    def test_endpoints_answer_503_until_loader_finishes(self, shape_dir, toy_suite, tmp_path):
        gate = threading.Event()

        def loader(state: ServiceState) -> None:
            gate.wait(timeout=10)
            state.suite = toy_suite
            state.params = live_params()
            state.registry = ShapeRegistry.from_dir(shape_dir)
            state.mark_ready()

        state = ServiceState(runs_dir=tmp_path / "runs")
        with TestClient(create_app(state, loader=loader)) as client:
            early = client.get("/health")
            assert early.status_code == 503
            assert early.json()["status"] == "loading"
            assert client.get("/shapes").status_code == 503
            assert client.post("/generate", json=generate_payload()).status_code == 503
            gate.set()
            deadline = time.monotonic() + 10
            while time.monotonic() < deadline:
                if client.get("/health").status_code == 200:
                    break
                time.sleep(0.02)
            assert client.get("/health").status_code == 200
            assert client.get("/shapes").status_code == 200


class TestShapesAndEncoding:
    def test_shape_listing(self, service):
        client, _ = service
        body = client.get("/shapes").json()
        assert body == {"shapes": [
            {"shape_id": "ball_01", "category": "ball"},
            {"shape_id": "pole_01", "category": "pole"},
        ]}

    def test_encode_reports_cache_state(self, service):
        client, _ = service
        first = client.post("/encode_shape", json={"shape_id": "ball_01"}).json()
        assert first == {"shape_id": "ball_01", "token_count": 65,
                         "shape_dim": 8, "cache_hit": False}
        second = client.post("/encode_shape", json={"shape_id": "ball_01"}).json()
        assert second["cache_hit"] is True

    def test_unknown_shape_404(self, service):
        client, _ = service
        assert client.post("/encode_shape", json={"shape_id": "cube_9"}).status_code == 404


class TestGenerate:
    def test_run_artifacts_and_payload(self, service):
        client, state = service
        response = client.post("/generate", json=generate_payload())
        assert response.status_code == 200
        body = response.json()
        assert body["layout"] == {"shape_span": [5, 5], "eos_index": 6}
        assert body["timing_ms"] > 0
        assert -100.0 <= body["metrics"]["clip"] <= 100.0

        run_dir = state.runs_dir / body["run_id"]
        image_bytes = base64.b64decode(body["image"])
        assert image_bytes[:8] == PNG_MAGIC
        assert image_bytes == (run_dir / "image.png").read_bytes()
        request_record = (run_dir / "request.json").read_text()
        assert '"lambda"' in request_record
        assert (run_dir / "metrics.json").is_file()

    def test_strength_changes_the_image(self, service):
        client, _ = service
        full = client.post("/generate", json=generate_payload(strategy="all_tokens")).json()
        off = client.post("/generate", json=generate_payload(**{"lambda": 0.0})).json()
        assert full["image"] != off["image"]

    def test_validation_errors_are_fielded_400s(self, service):
        client, _ = service
        cases = [
            (generate_payload(**{"lambda": 1.5}), "lambda"),
            (generate_payload(steps=0), "steps"),
            (generate_payload(strategy="some"), "strategy"),
            (generate_payload(handoff_k=150.0), "handoff_k"),
            ({"prompt_template": TEMPLATE}, "shape_id"),
        ]
        for payload, field in cases:
            response = client.post("/generate", json=payload)
            assert response.status_code == 400, field
            body = response.json()
            assert body["detail"] == "validation failed"
            assert field in {e["field"] for e in body["errors"]}

    def test_unknown_shape_404(self, service):
        client, _ = service
        response = client.post("/generate", json=generate_payload(shape_id="cube_9"))
        assert response.status_code == 404

    def test_bad_template_400(self, service):
        client, _ = service
        response = client.post("/generate",
                               json=generate_payload(prompt_template="no placeholder"))
        assert response.status_code == 400

    def test_handoff_needs_depth_ref(self, service):
        client, _ = service
        response = client.post("/generate", json=generate_payload(handoff_k=40.0))
        assert response.status_code == 400
        ok = client.post("/generate",
                         json=generate_payload(handoff_k=100.0, depth_ref=0.0))
        assert ok.status_code == 200

    def test_full_queue_rejects_with_429(self, service):
        client, state = service
        assert state.slots.try_acquire()
        assert state.slots.try_acquire()
        try:
            response = client.post("/generate", json=generate_payload())
            assert response.status_code == 429
        finally:
            state.slots.release()
            state.slots.release()
        assert client.post("/generate", json=generate_payload()).status_code == 200


class TestSweep:
    def test_one_image_per_strength(self, service):
        client, state = service
        payload = {"shape_id": "ball_01", "prompt_template": TEMPLATE,
                   "lambdas": [0.0, 0.33, 0.67, 1.0], "strategy": "all_tokens",
                   "seed": 0, "steps": 8}
        response = client.post("/sweep", json=payload)
        assert response.status_code == 200
        body = response.json()
        assert body["lambdas"] == [0.0, 0.33, 0.67, 1.0]
        assert len(body["images"]) == 4
        run_dir = state.runs_dir / body["run_id"]
        for i, payload_b64 in enumerate(body["images"]):
            file_bytes = (run_dir / f"image_{i:02d}.png").read_bytes()
            assert base64.b64decode(payload_b64) == file_bytes
            assert file_bytes[:8] == PNG_MAGIC
        assert body["images"][0] != body["images"][3]

    def test_empty_lambdas_rejected(self, service):
        client, _ = service
        payload = {"shape_id": "ball_01", "prompt_template": TEMPLATE, "lambdas": []}
        response = client.post("/sweep", json=payload)
        assert response.status_code == 400
        assert "lambdas" in {e["field"] for e in response.json()["errors"]}

    def test_unknown_shape_404(self, service):
        client, _ = service
        payload = {"shape_id": "cube_9", "prompt_template": TEMPLATE, "lambdas": [0.5]}
        assert client.post("/sweep", json=payload).status_code == 404


class TestRuns:
    def test_round_trip_via_run_endpoint(self, service):
        client, _ = service
        created = client.post("/generate", json=generate_payload()).json()
        fetched = client.get(f"/runs/{created['run_id']}")
        assert fetched.status_code == 200
        record = fetched.json()
        assert record["run_id"] == created["run_id"]
        assert record["request"]["shape_id"] == "ball_01"
        assert record["request"]["lambda"] == 1.0
        assert record["metrics"] == created["metrics"]
        assert record["images"] == [created["image"]]

    def test_unknown_run_404(self, service):
        client, _ = service
        assert client.get("/runs/20990101-000000-deadbeef").status_code == 404

    def test_run_ids_outside_the_safe_alphabet_are_rejected(self, service):
        client, state = service
        # even an existing directory is unreachable when its name fails the guard
        decoy = state.runs_dir / "x.y"
        decoy.mkdir(parents=True)
        (decoy / "metrics.json").write_text("{}")
        assert client.get("/runs/x.y").status_code == 404
        assert client.get("/runs/x_y").status_code == 404
