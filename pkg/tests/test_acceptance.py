"""Release gate: one test per shipping criterion.

Each test emits a single PASS/FAIL line with its measured numbers, then
asserts. The lines are collected in RESULTS and replayed by the terminal
summary hook in conftest.py so they survive output capture. Criteria carry
wall-clock budgets; the measured duration is part of the check. Oracles are
local to this file and deliberately naive.
"""

from __future__ import annotations

import math
import sys
import time

import numpy as np
import scipy.linalg
import torch

from shapetokens.backends.base import ddpm_alphas_cumprod
from shapetokens.evaluation import (
    MaskPair,
    frechet_distance,
    kernel_distance,
    multiview_adherence,
    silhouette_chamfer,
    silhouette_iou,
)
from shapetokens.generation import (
    HandoffSpec,
    SamplerConfig,
    generate,
    generate_plain,
    generate_with_handoff,
)
from shapetokens.geometry import (
    ViewSpec,
    farthest_point_sample,
    load_cloud,
    normalize_cloud,
    render_depth,
    render_silhouette,
)
from shapetokens.prompts import (
    STRATEGIES,
    TokenLayout,
    build_prompt_bank,
    default_adjectives,
    default_mediums,
    encode_prompt,
    expand_template,
)
from shapetokens.residual import GuidanceSpec, ResidualMapper, apply_residual, init_params
from shapetokens.training import SdsConfig, TrainConfig, dreamtime_weights, sds_loss, train

TEMPLATE = "a photograph of a [SHAPE-ID]"

RESULTS: list[str] = []


def report(name: str, ok: bool, detail: str) -> None:
    status = "PASS" if ok else "FAIL"
    line = f"[acceptance] {name}: {status} ({detail})"
    RESULTS.append(line)
    print(line, file=sys.__stdout__, flush=True)
    assert ok, f"{name}: {detail}"


def live_params(seed: int = 3, scale: float = 0.3):
    params = init_params(16, 8, 16, 32, seed=0)
    gen = torch.Generator().manual_seed(seed)
    params.final_weight.data = torch.randn(16, 16, generator=gen) * scale
    return params


def randomized_params(seed: int, scale: float):
    params = init_params(16, 8, 16, 32, seed=0)
    gen = torch.Generator().manual_seed(seed)
    for _, tensor in params.named_tensors():
        tensor.data = torch.randn(tensor.shape, generator=gen) * scale
    return params


def test_01_lambda_zero_identity(toy_suite, shape_dir):
    """Zero guidance strength must reproduce plain-prompt output, byte for
    byte, whatever the mapper weights, strategy, seed, or step count."""
    start = time.perf_counter()
    params = live_params()
    bank = build_prompt_bank(default_mediums(), default_adjectives()).prompts
    clouds = {
        word: normalize_cloud(load_cloud(shape_dir / f"{word}_01.xyz"))
        for word in ("ball", "pole")
    }
    rng = np.random.default_rng(0)
    matches = 0
    cases = 100
    for _ in range(cases):
        word = ("ball", "pole")[int(rng.integers(0, 2))]
        template = bank[int(rng.integers(0, len(bank)))]
        sampler = SamplerConfig(steps=int(rng.integers(4, 10)),
                                seed=int(rng.integers(0, 2**31)))
        strategy = STRATEGIES[int(rng.integers(0, len(STRATEGIES)))]
        guided = generate(toy_suite, params, clouds[word], template, word,
                          GuidanceSpec(0.0, strategy), sampler)
        plain = generate_plain(toy_suite, expand_template(template, word), sampler)
        matches += int(guided.tobytes() == plain.tobytes())
    took = time.perf_counter() - start
    report("01 lambda-zero identity", matches == cases and took < 60.0,
           f"{matches}/{cases} byte-identical, {took:.1f}s < 60s")


def test_02_strategy_locality():
    """object_and_eos edits touch only the object span and the EOS row."""
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    clean = 0
    cases = 1000
    for _ in range(cases):
        eos = int(rng.integers(3, 21))
        span_start = int(rng.integers(1, eos))
        span_end = int(rng.integers(span_start, eos))
        layout = TokenLayout(eos_index=eos, content_length=eos + 1,
                             shape_span=(span_start, span_end))
        text = rng.standard_normal((77, 16))
        delta = rng.standard_normal((77, 16))
        out = apply_residual(text, delta, GuidanceSpec(float(rng.uniform(0.1, 1.0)),
                                                       "object_and_eos"), layout)
        touched = set(range(span_start, span_end + 1)) | {eos}
        others = [r for r in range(77) if r not in touched]
        clean += int(np.asarray(out)[others].tobytes() == text[others].tobytes())
    took = time.perf_counter() - start
    report("02 strategy locality", clean == cases and took < 10.0,
           f"{clean}/{cases} untouched rows bit-identical, {took:.1f}s < 10s")


def test_03_key_permutation_invariance():
    """The residual is a set function of the shape tokens: reordering the
    attention keys/values must not move it beyond roundoff."""
    start = time.perf_counter()
    params = randomized_params(seed=4, scale=0.3).to_dtype(torch.float64)
    mapper = ResidualMapper(params)
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        text = rng.standard_normal((77, 16))
        tokens = rng.standard_normal((65, 8))
        base = np.asarray(mapper(tokens, text))
        norm = np.linalg.norm(base)
        for _ in range(20):
            perm = rng.permutation(65)
            other = np.asarray(mapper(tokens[perm], text))
            worst = max(worst, float(np.linalg.norm(other - base) / norm))
    took = time.perf_counter() - start
    report("03 key-permutation invariance", worst <= 1e-5 and took < 30.0,
           f"max relative drift {worst:.2e} <= 1e-5, {took:.1f}s < 30s")


def test_04_timestep_weighting():
    """Weights sum to one, peak at the window center on a flat schedule,
    and match the analytic two-point ratio."""
    start = time.perf_counter()

    def constant_schedule(t_max: int, value: float = 0.5) -> np.ndarray:
        schedule = np.full(t_max + 1, value)
        schedule[0] = 1.0
        return schedule

    cases = [
        (SdsConfig(t_max=1000), ddpm_alphas_cumprod(1000)),
        (SdsConfig(t_max=100), ddpm_alphas_cumprod(100)),
        (SdsConfig(center=100.0, width=30.0, t_max=500), ddpm_alphas_cumprod(500)),
        (SdsConfig(t_max=1000), constant_schedule(1000, 0.9)),
        (SdsConfig(center=2.0, width=1.0, t_max=10), ddpm_alphas_cumprod(10)),
    ]
    sum_err = max(abs(float(dreamtime_weights(cfg, sched).sum()) - 1.0)
                  for cfg, sched in cases)
    flat = dreamtime_weights(SdsConfig(t_max=1000), constant_schedule(1000))
    peak = int(np.argmax(flat))
    ratio_err = abs(float(flat[500] / flat[750]) - math.exp(0.5))
    took = time.perf_counter() - start
    ok = sum_err <= 1e-9 and peak == 500 and ratio_err <= 1e-9 and took < 5.0
    report("04 timestep weighting", ok,
           f"max |sum-1| {sum_err:.1e}, flat peak t={peak}, "
           f"|W(500)/W(750)-e^0.5| {ratio_err:.1e}, {took:.1f}s < 5s")


def test_05_sds_gradient_check(toy_suite):
    """Autograd through the distillation loss agrees with central finite
    differences at 10 random coordinates in every mapper block, in 64-bit."""
    start = time.perf_counter()
    params = randomized_params(seed=5, scale=0.1).to_dtype(torch.float64)
    rng = np.random.default_rng(3)
    tokens = rng.standard_normal((65, 8))
    emb, layout = toy_suite.text.encode("a photograph of a ball")
    latent = rng.standard_normal((4, 8, 8))
    noise = rng.standard_normal((4, 8, 8))
    den = toy_suite.denoiser
    cfg = SdsConfig(t_max=den.t_max)

    def value() -> float:
        loss, _ = sds_loss(den, tokens, emb, layout, params, latent, 40, noise, cfg)
        return loss

    _, grads = sds_loss(den, tokens, emb, layout, params, latent, 40, noise, cfg)
    tensors = params.tensors()
    per_block = len(tensors[:-1]) // len(params.blocks)
    # Central differences at h resolve a coordinate down to roughly
    # eps * loss / h; below that scale relative error is meaningless, so
    # tiny gradients are held to absolute agreement instead.
    h = 1e-5
    floor = 1e-5
    worst = 0.0
    tiny_ok = True
    checked = 0
    for b in range(len(params.blocks)):
        block_tensors = tensors[b * per_block:(b + 1) * per_block]
        block_grads = grads[b * per_block:(b + 1) * per_block]
        sizes = [t.numel() for t in block_tensors]
        total = sum(sizes)
        for pos in rng.choice(total, size=10, replace=False):
            which = int(np.searchsorted(np.cumsum(sizes), pos, side="right"))
            idx = int(pos - sum(sizes[:which]))
            flat = block_tensors[which].data.view(-1)
            orig = float(flat[idx])
            flat[idx] = orig + h
            up = value()
            flat[idx] = orig - h
            down = value()
            flat[idx] = orig
            numeric = (up - down) / (2 * h)
            analytic = float(block_grads[which].view(-1)[idx])
            checked += 1
            scale = max(abs(numeric), abs(analytic))
            if scale < floor:
                tiny_ok = tiny_ok and abs(numeric - analytic) < floor
            else:
                worst = max(worst, abs(numeric - analytic) / scale)
    took = time.perf_counter() - start
    ok = (worst < 1e-4 and tiny_ok and checked == 10 * len(params.blocks)
          and took < 120.0)
    report("05 sds gradient check", ok,
           f"{checked} coords across {len(params.blocks)} blocks, "
           f"max rel err {worst:.2e} < 1e-4, {took:.1f}s < 120s")


def test_06_training_smoke(tiny_dataset, toy_suite, shape_dir):
    """300 seeded steps on 2 shapes x 2 prompt templates: the smoothed loss
    halves, the two shapes earn distinguishable object-row residuals, and a
    rerun is bit-identical."""
    start = time.perf_counter()
    cfg = TrainConfig(learning_rate=5e-3, warmup_steps=30, epochs=20,
                      batch_size=4, seed=0)
    first = train(tiny_dataset, toy_suite, init_params(16, 8, 16, 32, seed=0), cfg)
    losses = [entry["loss"] for entry in first.log]
    ratio = float(np.mean(losses[-50:]) / np.mean(losses[:50]))

    mapper = ResidualMapper(first.params)
    vecs = []
    for word in ("ball", "pole"):
        cloud = normalize_cloud(load_cloud(shape_dir / f"{word}_01.xyz"))
        tokens = toy_suite.shape.encode(cloud.points)
        emb, layout = encode_prompt(toy_suite.text, f"a photograph of a {word}", word)
        delta = np.asarray(mapper(tokens, emb))
        span_start, span_end = layout.shape_span
        vecs.append(delta[span_start:span_end + 1].mean(axis=0))
    cos = float(vecs[0] @ vecs[1] / (np.linalg.norm(vecs[0]) * np.linalg.norm(vecs[1])))

    second = train(tiny_dataset, toy_suite, init_params(16, 8, 16, 32, seed=0), cfg)
    reproducible = losses == [entry["loss"] for entry in second.log] and all(
        torch.equal(a, b) for a, b in zip(first.params.tensors(), second.params.tensors())
    )
    took = time.perf_counter() - start
    ok = (len(losses) == 300 and ratio <= 0.5 and cos < 0.99
          and reproducible and took < 300.0)
    report("06 training smoke", ok,
           f"{len(losses)} steps, loss ratio {ratio:.3f} <= 0.5, object-row "
           f"cosine {cos:.3f} < 0.99, rerun identical={reproducible}, "
           f"{took:.1f}s < 300s")


def test_07_fps_oracle():
    """Library farthest-point sampling equals the literal greedy loop."""
    start = time.perf_counter()

    def brute(points: np.ndarray, k: int, start_index: int) -> list[int]:
        chosen = [start_index]
        dists = np.linalg.norm(points - points[start_index], axis=1)
        for _ in range(k - 1):
            best_i, best_d = 0, -1.0
            for i, d in enumerate(dists):
                if d > best_d:
                    best_i, best_d = i, float(d)
            chosen.append(best_i)
            dists = np.minimum(dists, np.linalg.norm(points - points[best_i], axis=1))
        return chosen

    rng = np.random.default_rng(6)
    exact = 0
    cases = 100
    for _ in range(cases):
        n = int(rng.integers(8, 129))
        k = int(rng.integers(1, min(32, n) + 1))
        start_index = int(rng.integers(0, n))
        points = rng.standard_normal((n, 3))
        got = farthest_point_sample(points, k, start_index=start_index)
        exact += int(list(got) == brute(points, k, start_index))
    took = time.perf_counter() - start
    report("07 fps oracle equivalence", exact == cases and took < 10.0,
           f"{exact}/{cases} exact greedy matches, {took:.1f}s < 10s")


def test_08_metric_oracles():
    """Overlap metrics on closed-form cases; set distances against an
    independent matrix-square-root route and a bootstrap null."""
    start = time.perf_counter()
    a = np.zeros((6, 6), dtype=np.uint8)
    b = np.zeros((6, 6), dtype=np.uint8)
    a[0:4, 0:4] = 1
    b[2:6, 0:4] = 1
    iou_ok = (silhouette_iou(MaskPair(a, b)) == 8 / 24
              and silhouette_iou(MaskPair(a, a)) == 1.0
              and silhouette_chamfer(MaskPair(a, a)) == 0.0)

    fid_analytic = frechet_distance(np.array([[0.0], [2.0]]), np.array([[1.0], [3.0]]))
    fid_analytic_err = abs(fid_analytic - 1.0)

    rng = np.random.default_rng(7)
    fid_oracle_err = 0.0
    for _ in range(3):
        x = rng.standard_normal((40, 6))
        y = rng.standard_normal((50, 6)) * 1.3 + 0.4
        cov_x = np.cov(x, rowvar=False) + 1e-6 * np.eye(6)
        cov_y = np.cov(y, rowvar=False) + 1e-6 * np.eye(6)
        want = float(((x.mean(0) - y.mean(0)) ** 2).sum() + np.trace(cov_x)
                     + np.trace(cov_y)
                     - 2.0 * np.trace(scipy.linalg.sqrtm(cov_x @ cov_y).real))
        fid_oracle_err = max(fid_oracle_err, abs(frechet_distance(x, y) - want))

    x = rng.standard_normal((120, 8))
    y = rng.standard_normal((120, 8))
    kid = kernel_distance(x, y)
    boots = []
    for _ in range(200):
        bi = rng.integers(0, 120, 120)
        bj = rng.integers(0, 120, 120)
        boots.append(kernel_distance(x[bi], y[bj]))
    sigma = float(np.std(boots))
    kid_ok = abs(kid) < 3.0 * sigma

    took = time.perf_counter() - start
    ok = (iou_ok and fid_analytic_err <= 1e-6 and fid_oracle_err <= 1e-6
          and kid_ok and took < 60.0)
    report("08 metric oracles", ok,
           f"overlap exact={iou_ok}, fid analytic err {fid_analytic_err:.1e}, "
           f"fid oracle err {fid_oracle_err:.1e}, |kid| {abs(kid):.2f} < "
           f"3x bootstrap sigma {3 * sigma:.2f}, {took:.1f}s < 60s")


def test_09_closed_loop_adherence(toy_suite, shape_dir):
    """Compositing the reference silhouette in segmenter colors must score
    perfect adherence on all six turntable views of both shapes."""
    start = time.perf_counter()
    fg = np.array([0.78, 0.31, 0.24])
    bg = np.array([0.20, 0.70, 0.80])
    azimuths = tuple(float(a) for a in range(0, 360, 60))
    details = []
    ok = True
    for word in ("ball", "pole"):
        cloud = normalize_cloud(load_cloud(shape_dir / f"{word}_01.xyz"))

        def gen(view: ViewSpec, cloud=cloud) -> np.ndarray:
            mask = render_silhouette(cloud, view)
            return np.where(mask[..., None].astype(bool), fg, bg)

        result = multiview_adherence(cloud, gen, toy_suite.segmenter, azimuths)
        ok = ok and (result.mean_iou == 1.0 and result.mean_chamfer == 0.0
                     and result.views_used == 6)
        details.append(f"{word}: iou {result.mean_iou}, cd {result.mean_chamfer}, "
                       f"views {result.views_used}/6")
    took = time.perf_counter() - start
    report("09 closed-loop adherence", ok and took < 30.0,
           "; ".join(details) + f", {took:.1f}s < 30s")


def test_10_handoff_accounting(toy_suite, shape_dir):
    """With 100 steps, a K% handoff spends exactly K calls on the depth
    branch and 100-K on the text branch."""
    start = time.perf_counter()
    params = live_params()
    cloud = normalize_cloud(load_cloud(shape_dir / "ball_01.xyz"))
    depth = render_depth(cloud, ViewSpec(0.0, height=64, width=64))
    sampler = SamplerConfig(steps=100, seed=0)
    spec = GuidanceSpec(1.0, "all_tokens")
    splits = []
    ok = True
    for k in (0, 20, 40, 60, 80, 100):
        counters: dict[str, int] = {}
        handoff = HandoffSpec(float(k), depth=depth if k > 0 else None)
        generate_with_handoff(toy_suite, params, handoff, cloud, TEMPLATE, "ball",
                              spec, sampler, counters=counters)
        control = counters.get("control", 0)
        text = counters.get("text", 0)
        ok = ok and (control, text) == (k, 100 - k)
        splits.append(f"K={k}: ({control},{text})")
    took = time.perf_counter() - start
    report("10 handoff accounting", ok and took < 30.0,
           "; ".join(splits) + f", {took:.1f}s < 30s")


def test_11_prompt_bank():
    """The shipped word lists expand to exactly 13716 unique prompts."""
    start = time.perf_counter()
    mediums = default_mediums()
    adjectives = default_adjectives()
    bank = build_prompt_bank(mediums, adjectives)
    took = time.perf_counter() - start
    ok = (len(mediums) == 127 and len(adjectives) == 108
          and len(bank.prompts) == 13716
          and len(set(bank.prompts)) == 13716 and took < 5.0)
    report("11 prompt bank", ok,
           f"{len(mediums)} mediums x {len(adjectives)} adjectives -> "
           f"{len(set(bank.prompts))} unique prompts, {took:.1f}s < 5s")
