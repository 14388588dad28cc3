"""Umbrella command line: data generation, training, evaluation, single-shot
localization, the calibration experiment, and the HTTP service."""

from __future__ import annotations

import json
import os
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from .archive import read_split
from .datasets import (BenchmarkSpec, EVAL_DIR, TRAIN_DIR, generate_benchmark,
                       load_benchmark)
from .evaluation import evaluate
from .experiments import CalibrationConfig, run_calibration
from .model import ModelConfig
from .reporting import (save_detection_overlay, save_loss_curves,
                        write_report_files)
from .scenes import SceneConfig
from .sketches import parse_stroke_file, sketch_categories
from .training import (STAGE_NO_ATTENTION, STAGE_WITH_ATTENTION, TrainConfig,
                       TrainDataset, run_stage)


@click.group()
def main():
    """Sketch-guided object localization, desk scale."""


@main.command("generate-data")
@click.option("--seed", "-s", type=int, default=0, show_default=True)
@click.option("--n-scenes", "-n", type=int, default=2000, show_default=True,
              help="Training scenes; eval pool is ~1/13 of this, at least 100.")
@click.option("--n-sketches", "-m", type=int, default=8, show_default=True,
              help="Browsable sketches per category in sketches.ndjson.")
@click.option("--unseen", "-k", type=int, default=2, show_default=True)
@click.option("--out", "-o", type=click.Path(path_type=Path), required=True)
@click.option("--image-size", type=int, default=128, show_default=True)
def cmd_generate_data(seed, n_scenes, n_sketches, unseen, out, image_size):
    """Generate the synthetic benchmark: split, scene archives, sketch file."""
    spec = BenchmarkSpec(
        seed=seed, n_train_scenes=n_scenes,
        n_eval_scenes=max(100, n_scenes // 13),
        n_sketches_per_category=n_sketches, n_unseen=unseen,
        scene=SceneConfig(image_size=image_size))
    generate_benchmark(out, spec)
    split = read_split(out / "split.json")
    click.echo(f"wrote {out}: {n_scenes} train scenes ({TRAIN_DIR}/), "
               f"{spec.n_eval_scenes} eval scenes ({EVAL_DIR}/), "
               f"seen={sorted(split.seen)}, unseen={sorted(split.unseen)}")


@main.command("train")
@click.option("--data", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--stage", type=click.Choice(["1", "2"]), default="1", show_default=True)
@click.option("--resume", type=click.Path(exists=True, path_type=Path), default=None,
              help="Stage-1 checkpoint to resume from (required for stage 2).")
@click.option("--epochs", type=int, default=2, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--no-margin-rank", is_flag=True,
              help="Drop the margin-rank term (the ranking-loss ablation).")
@click.option("--lr", type=float, default=0.01, show_default=True)
def cmd_train(data, out, stage, resume, epochs, seed, no_margin_rank, lr):
    """Train one stage of the incremental protocol on a generated benchmark."""
    bench = load_benchmark(data)
    dataset = TrainDataset(scenes=[r.scene for r in bench.train],
                           categories=tuple(sorted(bench.split.seen)))
    image_size = bench.train[0].scene.image.shape[0]
    config = ModelConfig(image_size=image_size)
    cfg = TrainConfig(
        lr0=lr, epochs=epochs, seed=seed,
        stage=STAGE_NO_ATTENTION if stage == "1" else STAGE_WITH_ATTENTION,
        margin_rank_weight=0.0 if no_margin_rank else 1.0)
    output = run_stage(config, dataset, cfg, out, resume=resume)
    save_loss_curves(output.metrics, Path(out) / f"{cfg.stage}_loss.png")
    click.echo(f"checkpoint: {output.checkpoint}")
    click.echo(f"metrics:    {output.metrics}")


@main.command("evaluate")
@click.option("--ckpt", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--data", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--split", type=click.Choice(["common", "disjoint"]), default="common",
              show_default=True,
              help="common = seen categories, disjoint = unseen categories.")
@click.option("--n-queries", type=int, default=1, show_default=True)
@click.option("--fusion", type=click.Choice(["feature", "attention"]),
              default="feature", show_default=True)
@click.option("--report", type=click.Path(path_type=Path), required=True)
@click.option("--seed", type=int, default=100, show_default=True)
@click.option("--noise", type=float, default=0.5, show_default=True)
def cmd_evaluate(ckpt, data, split, n_queries, fusion, report, seed, noise):
    """Evaluate a checkpoint; writes report.json, report.csv and figures."""
    from .service import load_model

    bench = load_benchmark(data)
    model, meta = load_model(ckpt, ModelConfig(
        image_size=bench.eval[0].scene.image.shape[0]))
    cats = sorted(bench.split.seen if split == "common" else bench.split.unseen)
    result = evaluate(model, bench.eval_scenes(), cats,
                      split="seen" if split == "common" else "unseen",
                      n_queries=n_queries, fusion=fusion, seed=seed,
                      sketch_noise=noise,
                      trained_categories=meta.get("categories"),
                      scene_ids=bench.eval_ids())
    report = Path(report)
    paths = write_report_files(result, report.parent, stem=report.stem)
    click.echo(f"AP@50 {result.ap50:.4f}  mAP {result.map:.4f}  "
               f"({result.n_pairs} query pairs)")
    for kind, p in paths.items():
        click.echo(f"{kind}: {p}")


@main.command("localize")
@click.option("--image", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--sketch", type=click.Path(exists=True, path_type=Path), required=True,
              help="Stroke file; all of its sketches form one fused query bundle.")
@click.option("--ckpt", type=click.Path(path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--overlay", type=click.Path(path_type=Path), default=None,
              help="Also render a detection + heatmap overlay image.")
@click.option("--fusion", type=click.Choice(["feature", "attention"]),
              default="feature", show_default=True)
@click.option("--max-detections", type=int, default=10, show_default=True)
def cmd_localize(image, sketch, ckpt, out, overlay, fusion, max_detections):
    """Offline single-image localization; writes the detection record."""
    from PIL import Image as PilImage

    from .inference import localize
    from .service import load_model

    if not Path(ckpt).exists():
        raise click.ClickException(f"checkpoint not found: {ckpt}")
    model, _meta = load_model(ckpt)
    with PilImage.open(image) as im:
        img = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    sketches = parse_stroke_file(Path(sketch).read_bytes()).sketches
    if not sketches:
        raise click.ClickException(f"no sketches in {sketch}")
    result = localize(model, img, sketches, fusion=fusion,
                      max_detections=max_detections)
    record = {"detections": result.detections, "model_digest": result.model_digest}
    Path(out).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    click.echo(f"{len(result.detections)} detections -> {out}")
    if overlay:
        save_detection_overlay(img, result.detections, overlay,
                               attention=result.attention)
        click.echo(f"overlay -> {overlay}")


@main.command("calibrate")
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--seeds", type=str, default="0,1,2", show_default=True)
@click.option("--epochs", type=int, default=2, show_default=True)
@click.option("--n-scenes", type=int, default=2000, show_default=True)
def cmd_calibrate(out, seeds, epochs, n_scenes):
    """Run the full calibration experiment (training + evaluation sweep)."""
    cfg = CalibrationConfig(
        benchmark=BenchmarkSpec(n_train_scenes=n_scenes),
        train=TrainConfig(epochs=epochs),
        seeds=tuple(int(s) for s in seeds.split(",")))
    result = run_calibration(cfg, out)
    click.echo(f"untrained seen AP@50: {result.untrained_seen_ap50:.4f}")
    for s in sorted(result.seen_ap50):
        click.echo(f"seed {s}: seen {result.seen_ap50[s]:.4f} "
                   f"(no-MR {result.seen_ap50_nomr[s]:.4f}), "
                   f"unseen stage1 {result.unseen_ap50_stage1[s]:.4f} "
                   f"-> stage2 {result.unseen_ap50_stage2[s]:.4f}")
    for name in sorted(result.multi_query_ap50):
        click.echo(f"multi-query {name}: {result.multi_query_ap50[name]:.4f}")
    click.echo(f"summary: {out}/calibration_summary.csv (+ .png)")


@main.command("serve")
@click.option("--ckpt", type=click.Path(path_type=Path),
              default=lambda: os.environ.get("SKETCHLOC_CKPT"), required=True)
@click.option("--host", default=lambda: os.environ.get("SKETCHLOC_HOST", "127.0.0.1"))
@click.option("--port", type=int, default=lambda: int(os.environ.get("SKETCHLOC_PORT", "8008")))
@click.option("--gallery", type=click.Path(path_type=Path),
              default=lambda: os.environ.get("SKETCHLOC_GALLERY"))
@click.option("--config", "config_file", type=click.Path(exists=True, path_type=Path),
              default=None, help="JSON file mirroring these flags.")
def cmd_serve(ckpt, host, port, gallery, config_file):
    """Run the localization HTTP service."""
    from .service import serve

    if config_file:
        file_cfg = json.loads(Path(config_file).read_text())
        ckpt = file_cfg.get("ckpt", ckpt)
        host = file_cfg.get("host", host)
        port = file_cfg.get("port", port)
        gallery = file_cfg.get("gallery", gallery)
    if not ckpt:
        raise click.ClickException("no checkpoint: pass --ckpt or set SKETCHLOC_CKPT")
    serve(ckpt, host=host, port=port, gallery_dir=gallery)


@main.command("categories")
def cmd_categories():
    """List the synthetic shape categories."""
    click.echo("\n".join(sketch_categories()))
