"""SGD-with-momentum training loop: step LR decay, deterministic epoch
shuffling, gradient accumulation over the batch, and the two-stage
incremental protocol (attention off, then on)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, restore, save_checkpoint
from .model import ModelConfig, SketchLocalizer, stage2_from_stage1
from .pipeline import propose, sample_for_scoring, score_boxes, scoring_targets
from .proposals import TRAIN_PROPOSALS, rpn_targets
from .scenes import Scene
from .scoring import LossBreakdown, LossWeights, total_loss
from .sketches import generate_sketch, rasterize_sketch

STAGE_NO_ATTENTION = "no_attention"
STAGE_WITH_ATTENTION = "with_attention"


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    batch_size: int = 10
    lr_decay: float = 0.1
    decay_every: int = 4
    epochs: int = 30
    compat_k: float = 256.0
    m_plus: float = 0.3
    m_minus: float = 0.7
    stage: str = STAGE_NO_ATTENTION
    seed: int = 0
    background_query_prob: float = 0.25
    sketch_noise: tuple[float, float] = (0.1, 0.5)
    margin_rank_weight: float = 1.0
    reduce_mean: bool = True
    incremental: bool = True  # stage 2 requires a stage-1 checkpoint

    def __post_init__(self):
        if self.stage not in (STAGE_NO_ATTENTION, STAGE_WITH_ATTENTION):
            raise ValueError(f"unknown stage {self.stage!r}")
        for name in ("lr0", "momentum", "batch_size", "lr_decay", "decay_every", "epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def loss_weights(self) -> LossWeights:
        return LossWeights(margin_rank=self.margin_rank_weight, m_plus=self.m_plus,
                           m_minus=self.m_minus, reduce_mean=self.reduce_mean)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: lr0 * lr_decay ** floor(epoch / decay_every)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.decay_every)


class SGDOptimizer:
    """Classic momentum: v <- momentum * v + g; p <- p - lr * v."""

    def __init__(self, registry, momentum: float = 0.9):
        self.registry = list(registry)
        self.momentum = momentum
        self.velocities = {name: torch.zeros_like(p) for name, p in self.registry}
        self.step_count = 0

    def step(self, lr: float):
        with torch.no_grad():
            for name, p in self.registry:
                g = p.grad
                if g is None:
                    continue
                if not torch.isfinite(g).all():
                    raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
                v = self.velocities[name]
                v.mul_(self.momentum).add_(g)
                p.sub_(lr * v)
        self.step_count += 1

    def zero_grad(self):
        for _, p in self.registry:
            p.grad = None


METRICS_HEADER = "step,lr,margin,margin_rank,ce,box,rpn_obj,rpn_box,total"


def format_metrics_line(step: int, lr: float, breakdown: LossBreakdown) -> str:
    vals = ",".join(f"{v:.9g}" for v in breakdown.as_tuple())
    return f"{step},{lr:.9g},{vals}"


@dataclass
class TrainDataset:
    scenes: list[Scene]
    categories: tuple[str, ...]  # query universe (the seen split)

    def __post_init__(self):
        if not self.scenes:
            raise ValueError("dataset must contain at least one scene")
        self.categories = tuple(sorted(self.categories))


@dataclass
class TrainResult:
    model: SketchLocalizer
    metrics_lines: list[str]
    optimizer: SGDOptimizer

    def metrics_text(self) -> str:
        return "\n".join([METRICS_HEADER, *self.metrics_lines]) + "\n"


def _pick_query(scene: Scene, categories, rng: np.random.Generator, bg_prob: float) -> str:
    present = sorted(set(scene.categories) & set(categories))
    absent = sorted(set(categories) - set(scene.categories))
    if present and absent and rng.uniform() < bg_prob:
        return absent[rng.integers(0, len(absent))]
    if present:
        return present[rng.integers(0, len(present))]
    return absent[rng.integers(0, len(absent))]


def _sample_loss(model: SketchLocalizer, scene: Scene, category: str,
                 sketch_seed: int, noise: float, weights: LossWeights,
                 rng: np.random.Generator, sketch_size: int):
    raster = rasterize_sketch(generate_sketch(sketch_seed, category, noise), sketch_size)
    gt_all = np.array([o.box.as_array() for o in scene.objects]).reshape(-1, 4)
    out = propose(model, scene.image, [raster], fusion="feature",
                  prop_cfg=TRAIN_PROPOSALS, extra_boxes=gt_all)
    labels, box_targets = scoring_targets(out.proposal_boxes, scene, category)
    keep = sample_for_scoring(labels, rng)
    scored = score_boxes(model, out, out.proposal_boxes[keep])
    anchor_targets = rpn_targets(model.anchors, gt_all, rng)
    return total_loss(
        scored,
        torch.from_numpy(labels[keep]),
        torch.from_numpy(box_targets[keep]).to(scored.refine_deltas.dtype),
        out.rpn_logits, out.rpn_deltas,
        torch.from_numpy(anchor_targets.labels),
        torch.from_numpy(anchor_targets.delta_targets).to(out.rpn_deltas.dtype),
        weights)


def train(model: SketchLocalizer, dataset: TrainDataset, cfg: TrainConfig,
          callbacks=None, optimizer: SGDOptimizer | None = None) -> TrainResult:
    """Run the optimization loop; deterministic for fixed (model, dataset, cfg).

    Each optimizer step accumulates gradients over cfg.batch_size
    (scene, query sketch) samples. Scene order reshuffles every epoch from
    (cfg.seed, epoch); query categories, sketch seeds and anchor sampling all
    draw from the same per-epoch stream.
    """
    if cfg.stage == STAGE_WITH_ATTENTION and not model.with_attention:
        raise ValueError("stage with_attention needs a model built with the attention branch")
    weights = cfg.loss_weights()
    opt = optimizer or SGDOptimizer(model.registry(), momentum=cfg.momentum)
    lines: list[str] = []
    step = 0
    noise_lo, noise_hi = cfg.sketch_noise
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        rng = np.random.default_rng((cfg.seed, epoch))
        order = rng.permutation(len(dataset.scenes))
        n_batches = max(1, len(order) // cfg.batch_size)
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            opt.zero_grad()
            agg = None
            batch_break = np.zeros(7)
            for i in idx:
                scene = dataset.scenes[i]
                category = _pick_query(scene, dataset.categories, rng,
                                       cfg.background_query_prob)
                noise = float(rng.uniform(noise_lo, noise_hi))
                sketch_seed = int(rng.integers(0, 2 ** 31))
                loss, breakdown = _sample_loss(
                    model, scene, category, sketch_seed, noise, weights, rng,
                    model.config.sketch_size)
                agg = loss if agg is None else agg + loss
                batch_break += np.array(breakdown.as_tuple())
            (agg / len(idx)).backward()
            opt.step(lr)
            step += 1
            mean_break = LossBreakdown(*(batch_break / len(idx)))
            lines.append(format_metrics_line(step, lr, mean_break))
            if callbacks:
                for cb in callbacks:
                    cb(step, epoch, mean_break)
    return TrainResult(model=model, metrics_lines=lines, optimizer=opt)


@dataclass
class StageOutput:
    checkpoint: Path
    metrics: Path
    result: TrainResult = field(repr=False, default=None)


def run_stage(config: ModelConfig, dataset: TrainDataset, cfg: TrainConfig,
              out_dir, resume: Path | None = None) -> StageOutput:
    """Train one stage and write its checkpoint + metrics log.

    Stage 1 builds a model without the attention branch. Stage 2 builds the
    attention-enabled model, initialized as a passthrough, and requires a
    stage-1 checkpoint when cfg.incremental (the default protocol).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.stage == STAGE_NO_ATTENTION:
        model = SketchLocalizer(replace(config, with_attention=False), seed=cfg.seed)
    else:
        if resume is None and cfg.incremental:
            raise ValueError("stage with_attention requires a stage-1 checkpoint "
                             "(pass resume=... or set incremental=False)")
        model = stage2_from_stage1(config, seed=cfg.seed)
        if resume is not None:
            restore(model, load_checkpoint(resume), strict=False)
    result = train(model, dataset, cfg)
    meta = {
        "stage": cfg.stage,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "categories": list(dataset.categories),
        "image_size": config.image_size,
        "sketch_size": config.sketch_size,
    }
    ckpt = out_dir / f"{cfg.stage}.ckpt"
    save_checkpoint(model, ckpt, optimizer_state=result.optimizer.velocities, meta=meta)
    metrics = out_dir / f"{cfg.stage}_metrics.csv"
    metrics.write_text(result.metrics_text())
    return StageOutput(checkpoint=ckpt, metrics=metrics, result=result)


def two_stage_train(config: ModelConfig, dataset: TrainDataset, cfg: TrainConfig,
                    out_dir) -> tuple[StageOutput, StageOutput]:
    """The incremental protocol: train without attention, then resume with it."""
    stage1 = run_stage(config, dataset, replace(cfg, stage=STAGE_NO_ATTENTION), out_dir)
    stage2 = run_stage(config, dataset, replace(cfg, stage=STAGE_WITH_ATTENTION),
                       out_dir, resume=stage1.checkpoint)
    return stage1, stage2
