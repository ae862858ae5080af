"""Command-line surface over the library.

Exit codes follow one contract everywhere: 0 success, 1 for usage or
validation problems (bad flags, out-of-range values, unknown subcommands),
2 for runtime failures (unreadable files, backend errors, training
divergence). Click's own usage errors default to exit 2, so dispatch runs
in non-standalone mode and remaps them.
"""

from __future__ import annotations

import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from shapetokens.backends import BackendConfig, BackendError, load_backend_suite
from shapetokens.backends.base import BackendSuite
from shapetokens.config import ConfigError, load_config
from shapetokens.dataset import DatasetError, build_dataset, category_of, read_manifest
from shapetokens.evaluation import (
    EvaluationError,
    assemble_report,
    clip_score,
    frechet_distance,
    kernel_distance,
    multiview_adherence,
)
from shapetokens.generation import (
    GenerationError,
    HandoffSpec,
    SamplerConfig,
    generate,
    generate_with_handoff,
    sweep_lambda,
)
from shapetokens.geometry import (
    GeometryError,
    PointCloud,
    ViewSpec,
    load_cloud,
    load_depth_png,
    load_image_png,
    normalize_cloud,
    render_depth,
    render_silhouette,
    save_image_png,
)
from shapetokens.prompts import (
    PromptError,
    STRATEGIES,
    build_prompt_bank,
    default_adjectives,
    default_mediums,
    expand_template,
)
from shapetokens.registry import RegistryError, ShapeRegistry
from shapetokens.reporting import (
    render_sweep_figure,
    render_training_curve,
    summary_table,
    write_report_bundle,
)
from shapetokens.residual import GuidanceSpec, ParamsError, init_params, load_params
from shapetokens.training import TrainConfig, TrainingError, train

_RUNTIME_ERRORS = (
    BackendError,
    ConfigError,
    DatasetError,
    EvaluationError,
    GenerationError,
    GeometryError,
    ParamsError,
    PromptError,
    RegistryError,
    TrainingError,
    OSError,
)


def _load_mapping(config_path: str | None) -> dict:
    return load_config(config_path) if config_path else {}


def _load_suite(mapping: dict) -> BackendSuite:
    if any(key.startswith("backend.") for key in mapping):
        return load_backend_suite(BackendConfig.from_mapping(mapping))
    return load_backend_suite(BackendConfig())


def _mapper_dims(mapping: dict, suite: BackendSuite) -> tuple[int, int, int, int]:
    attn = int(mapping.get("mapper.attn_dim", 16))
    hidden = int(mapping.get("mapper.hidden_dim", 32))
    return suite.text.embed_dim, suite.shape.shape_dim, attn, hidden


def _params_for(
    params_path: str | None, mapping: dict, suite: BackendSuite, seed: int = 0
):
    if params_path:
        return load_params(params_path)
    text_dim, shape_dim, attn, hidden = _mapper_dims(mapping, suite)
    return init_params(text_dim, shape_dim, attn, hidden, seed=seed)


def _check_lambda(value: float, name: str = "--lambda") -> float:
    if not 0.0 <= value <= 1.0:
        raise click.BadParameter("must lie in [0, 1]", param_hint=name)
    return value


@click.group(name="shapetokens")
def main() -> None:
    """Shape-conditioned prompt embeddings: train, generate, evaluate."""


@main.command("build-dataset")
@click.option("--shapes", "shapes_dir", required=True, type=click.Path(exists=True, file_okay=False),
              help="Directory of .xyz/.ply point clouds.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--bank", "bank_path", type=click.Path(exists=True, dir_okay=False),
              help="Prompt templates, one per line; default is the packaged bank.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--image-size", default=64, show_default=True, type=int)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
def build_dataset_cmd(shapes_dir, out_dir, bank_path, seed, image_size, config_path):
    """Render views, assign prompts, synthesize images, write a manifest."""
    mapping = _load_mapping(config_path)
    suite = _load_suite(mapping)
    if bank_path:
        lines = [l.strip() for l in Path(bank_path).read_text(encoding="utf-8").splitlines()]
        bank = [l for l in lines if l and not l.startswith("#")]
        if not bank:
            raise click.BadParameter("bank file has no templates", param_hint="--bank")
    else:
        bank = build_prompt_bank(default_mediums(), default_adjectives()).prompts
    result = build_dataset(shapes_dir, bank, out_dir, suite, seed=seed, image_size=image_size)
    click.echo(f"wrote {result.record_count} records to {result.manifest_path}")


@main.command("train")
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--params", "params_path", type=click.Path(exists=True, dir_okay=False),
              help="Initial mapper parameters; fresh zero-residual init when omitted.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="Backend plus train.* keys (learning_rate, epochs, ...).")
def train_cmd(manifest, out_dir, params_path, config_path):
    """Optimize the residual mapper against the frozen toy denoiser."""
    mapping = _load_mapping(config_path)
    suite = _load_suite(mapping)
    cfg = TrainConfig.from_mapping(mapping)
    params = _params_for(params_path, mapping, suite, seed=cfg.seed)
    result = train(manifest, suite, params, cfg, out_dir)
    curve = render_training_curve(result.log, Path(out_dir) / "loss_curve.png")
    click.echo(
        f"trained {len(result.log)} steps, best smoothed loss {result.best_loss:.6f}; "
        f"params under {out_dir}, curve at {curve}"
    )


def _category_for(cloud_path: str, category: str | None) -> str:
    return category if category else category_of(Path(cloud_path).stem)


@main.command("generate")
@click.option("--shape", "cloud_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Point-cloud file (.xyz or .ply).")
@click.option("--prompt", "template", required=True,
              help="Prompt template containing [SHAPE-ID].")
@click.option("--params", "params_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--category", help="Override the category word (default: from the filename).")
@click.option("--lambda", "lam", default=1.0, show_default=True, type=float)
@click.option("--strategy", default="object_and_eos", show_default=True,
              type=click.Choice(STRATEGIES))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--steps", default=50, show_default=True, type=int)
@click.option("--handoff-k", default=None, type=float,
              help="Percent of steps under the depth branch before handoff.")
@click.option("--depth", "depth_path", type=click.Path(exists=True, dir_okay=False),
              help="16-bit depth PNG for the handoff phase.")
@click.option("--handoff-mode", default="shape_words", show_default=True,
              type=click.Choice(("shape_words", "control_stop")))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
def generate_cmd(cloud_path, template, params_path, category, lam, strategy, seed, steps,
                 handoff_k, depth_path, handoff_mode, out_path, config_path):
    """Generate one image from (shape, prompt, lambda)."""
    _check_lambda(lam)
    if handoff_k is not None and not 0 <= handoff_k <= 100:
        raise click.BadParameter("must lie in [0, 100]", param_hint="--handoff-k")
    if handoff_k is not None and handoff_k > 0 and not depth_path:
        raise click.BadParameter("required when --handoff-k > 0", param_hint="--depth")
    mapping = _load_mapping(config_path)
    suite = _load_suite(mapping)
    params = _params_for(params_path, mapping, suite)
    cloud = load_cloud(cloud_path)
    word = _category_for(cloud_path, category)
    sampler = SamplerConfig(steps=steps, seed=seed)
    spec = GuidanceSpec(lam, strategy)
    if handoff_k is not None:
        depth = load_depth_png(depth_path) if depth_path else None
        handoff = HandoffSpec(handoff_k, depth, expand_template(template, word), handoff_mode)
        image = generate_with_handoff(suite, params, handoff, cloud, template, word,
                                      spec, sampler)
    else:
        image = generate(suite, params, cloud, template, word, spec, sampler)
    save_image_png(image, out_path)
    click.echo(f"wrote {out_path}")


@main.command("sweep")
@click.option("--shape", "cloud_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--prompt", "template", required=True)
@click.option("--params", "params_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--category", help="Override the category word (default: from the filename).")
@click.option("--lambdas", default="0,0.33,0.67,1.0", show_default=True,
              help="Comma-separated guidance strengths.")
@click.option("--strategy", default="object_and_eos", show_default=True,
              type=click.Choice(STRATEGIES))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--steps", default=50, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
def sweep_cmd(cloud_path, template, params_path, category, lambdas, strategy, seed, steps,
              out_dir, config_path):
    """Generate a row of images across guidance strengths, plus a figure."""
    try:
        values = [float(part) for part in lambdas.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter(f"not a comma-separated float list: {lambdas!r}",
                                 param_hint="--lambdas")
    if not values:
        raise click.BadParameter("needs at least one value", param_hint="--lambdas")
    for v in values:
        _check_lambda(v, "--lambdas")
    mapping = _load_mapping(config_path)
    suite = _load_suite(mapping)
    params = _params_for(params_path, mapping, suite)
    cloud = load_cloud(cloud_path)
    word = _category_for(cloud_path, category)
    sampler = SamplerConfig(steps=steps, seed=seed)
    images = sweep_lambda(suite, params, cloud, template, word, values, strategy, sampler)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, (lam, image) in enumerate(zip(values, images)):
        save_image_png(image, out / f"image_{i:02d}_lambda{lam:g}.png")
    figure = render_sweep_figure(values, images, out / "sweep_strip.png")
    click.echo(f"wrote {len(images)} images and {figure}")


def _composite_generator(cloud: PointCloud):
    """Closed-loop stand-in: paint the reference silhouette in segmenter
    colors, so segmentation recovers the mask exactly."""
    fg = np.array([0.78, 0.31, 0.24])
    bg = np.array([0.20, 0.70, 0.80])

    def gen(view: ViewSpec) -> np.ndarray:
        mask = render_silhouette(cloud, view)
        return np.where(mask[..., None].astype(bool), fg, bg)

    return gen


def _residual_generator(suite, params, cloud, template, word, spec, steps, seed, handoff_k):
    def gen(view: ViewSpec) -> np.ndarray:
        sampler = SamplerConfig(steps=steps, seed=seed)
        if handoff_k and handoff_k > 0:
            depth = render_depth(cloud, view)
            handoff = HandoffSpec(handoff_k, depth, expand_template(template, word))
            return generate_with_handoff(suite, params, handoff, cloud, template, word,
                                         spec, sampler)
        return generate(suite, params, cloud, template, word, spec, sampler)

    return gen


@main.command("evaluate")
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--params", "params_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--views", default=6, show_default=True, type=int)
@click.option("--generator", default="residual", show_default=True,
              type=click.Choice(("residual", "composite")))
@click.option("--template", default="a photograph of a [SHAPE-ID]", show_default=True)
@click.option("--lambda", "lam", default=1.0, show_default=True, type=float)
@click.option("--strategy", default="object_and_eos", show_default=True,
              type=click.Choice(STRATEGIES))
@click.option("--handoff-k", default=0.0, show_default=True, type=float)
@click.option("--steps", default=20, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
def evaluate_cmd(manifest, params_path, out_dir, views, generator, template, lam, strategy,
                 handoff_k, steps, seed, config_path):
    """Score silhouette adherence, prompt similarity, and set distances."""
    _check_lambda(lam)
    if views < 1:
        raise click.BadParameter("must be >= 1", param_hint="--views")
    mapping = _load_mapping(config_path)
    suite = _load_suite(mapping)
    params = _params_for(params_path, mapping, suite)
    spec = GuidanceSpec(lam, strategy)
    records = read_manifest(manifest)
    manifest_dir = Path(manifest).parent
    by_shape: dict[str, dict] = {}
    for rec in records:
        by_shape.setdefault(str(rec["shape_id"]), rec)
    azimuths = tuple(i * (360.0 / views) for i in range(views))
    rows = []
    generated_feats = []
    for shape_id, rec in sorted(by_shape.items()):
        cloud = normalize_cloud(load_cloud(manifest_dir / str(rec["cloud_path"])))
        word = category_of(shape_id)
        if generator == "composite":
            gen = _composite_generator(cloud)
        else:
            gen = _residual_generator(suite, params, cloud, template, word, spec,
                                      steps, seed, handoff_k)
        adherence = multiview_adherence(cloud, gen, suite.segmenter, azimuths)
        front = np.asarray(gen(ViewSpec(0.0, height=64, width=64)))
        prompt = expand_template(template, word)
        generated_feats.append(suite.features.embed_image(front))
        rows.append({
            "shape_id": shape_id,
            "s_iou": adherence.mean_iou,
            "s_cd": adherence.mean_chamfer,
            "clip": clip_score(suite.features, front, prompt),
            "views_used": adherence.views_used,
            "exclusions": adherence.exclusions,
            "lambda": lam,
            "strategy": strategy,
            "handoff_k": handoff_k,
            "seed": seed,
        })
    report = assemble_report(rows)
    reference_feats = [
        suite.features.embed_image(load_image_png(manifest_dir / str(rec["image_path"])))
        for rec in records
    ]
    summary = dict(report.summary)
    if len(generated_feats) >= 2 and len(reference_feats) >= 2:
        gen_mat = np.stack(generated_feats)
        ref_mat = np.stack(reference_feats)
        summary["fid"] = frechet_distance(gen_mat, ref_mat)
        summary["kid"] = kernel_distance(gen_mat, ref_mat)
    try:
        aes_values = [
            suite.features.aesthetic_score(load_image_png(manifest_dir / str(r["image_path"])))
            for r in records[: min(len(records), 16)]
        ]
        summary["aes"] = float(np.mean(aes_values))
    except NotImplementedError:
        pass
    report = replace(report, summary=summary)
    bundle = write_report_bundle(report, out_dir)
    click.echo(summary_table(report))
    click.echo(f"report bundle under {out_dir} ({len(bundle['figures'])} figures)")


@main.command("encode-shape")
@click.option("--cloud", "cloud_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False),
              help="Write tokens as .npy; omit to just print their shape.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
def encode_shape_cmd(cloud_path, out_path, config_path):
    """Encode one cloud into shape tokens."""
    mapping = _load_mapping(config_path)
    suite = _load_suite(mapping)
    cloud = normalize_cloud(load_cloud(cloud_path))
    tokens = suite.shape.encode(cloud.points)
    if out_path:
        np.save(out_path, tokens)
        click.echo(f"wrote {tokens.shape[0]}x{tokens.shape[1]} tokens to {out_path}")
    else:
        click.echo(f"tokens: {tokens.shape[0]} x {tokens.shape[1]}")


@main.command("serve")
@click.option("--shapes", "shapes_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--params", "params_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--runs", "runs_dir", default="runs", show_default=True,
              type=click.Path(file_okay=False))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8787, show_default=True, type=int)
@click.option("--queue-slots", default=4, show_default=True, type=int)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
def serve_cmd(shapes_dir, params_path, runs_dir, host, port, queue_slots, config_path):
    """Serve the HTTP API over a shape directory."""
    import uvicorn

    from shapetokens.service import ServiceState, WorkSlots, create_app

    mapping = _load_mapping(config_path)
    suite = _load_suite(mapping)
    params = _params_for(params_path, mapping, suite)
    registry = ShapeRegistry.from_dir(shapes_dir)
    state = ServiceState(suite=suite, params=params, registry=registry,
                         runs_dir=Path(runs_dir), slots=WorkSlots(queue_slots))
    app = create_app(state)
    click.echo(f"serving {len(registry.ids())} shapes on {host}:{port}")
    uvicorn.run(app, host=host, port=port, log_level="warning")


def cli_dispatch(argv: list[str]) -> int:
    """Run the CLI with the documented exit-code contract."""
    try:
        main.main(args=list(argv), standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.UsageError as exc:
        message = exc.format_message()
        if exc.ctx is not None:
            click.echo(exc.ctx.get_usage(), err=True)
        click.echo(f"error: {message}", err=True)
        return 1
    except click.ClickException as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return 1
    except _RUNTIME_ERRORS as exc:
        click.echo(f"runtime failure: {exc}", err=True)
        return 2
    return 0


def entrypoint() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    entrypoint()
