"""The desk-scale calibration experiment: disjoint-split benchmark, two-stage
incremental training over several seeds, the margin-rank ablation arm, and
the multi-query fusion sweep. Results are written as CSV plus figures."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, restore
from .datasets import Benchmark, BenchmarkSpec, generate_benchmark, load_benchmark
from .evaluation import EvalReport, evaluate
from .model import ModelConfig, SketchLocalizer, stage2_from_stage1
from .training import (STAGE_NO_ATTENTION, STAGE_WITH_ATTENTION, TrainConfig,
                       TrainDataset, two_stage_train)


@dataclass(frozen=True)
class CalibrationConfig:
    benchmark: BenchmarkSpec = BenchmarkSpec()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig(epochs=2)
    seeds: tuple[int, ...] = (0, 1, 2)
    eval_seed: int = 100
    eval_noise: float = 0.5
    multi_query_noise: float = 0.6
    multi_query_eval_seeds: tuple[int, ...] = (100, 101, 102, 103, 104)
    multi_query_counts: tuple[int, ...] = (3, 5)

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True, default=str).encode()
        return hashlib.sha256(payload).hexdigest()[:12]


@dataclass
class SeedArtifacts:
    seed: int
    stage1_ckpt: Path
    stage2_ckpt: Path
    stage2_nomr_ckpt: Path


@dataclass
class CalibrationResult:
    config: CalibrationConfig
    benchmark_dir: Path
    artifacts: list[SeedArtifacts]
    untrained_seen_ap50: float
    seen_ap50: dict[int, float]             # stage-2 full model per seed
    seen_ap50_nomr: dict[int, float]        # stage-2 without margin-rank
    unseen_ap50_stage1: dict[int, float]
    unseen_ap50_stage2: dict[int, float]
    multi_query_ap50: dict[str, float]      # "N1", "N3_feature", ... -> mean over eval seeds
    reports: dict[str, EvalReport] = field(default_factory=dict, repr=False)

    def summary_rows(self) -> list[tuple]:
        rows = [("untrained_seen", "-", self.untrained_seen_ap50)]
        for s in sorted(self.seen_ap50):
            rows.append(("seen_stage2", s, self.seen_ap50[s]))
            rows.append(("seen_stage2_nomr", s, self.seen_ap50_nomr[s]))
            rows.append(("unseen_stage1", s, self.unseen_ap50_stage1[s]))
            rows.append(("unseen_stage2", s, self.unseen_ap50_stage2[s]))
        for name in sorted(self.multi_query_ap50):
            rows.append(("multi_query", name, self.multi_query_ap50[name]))
        return rows


def _ensure_benchmark(cfg: CalibrationConfig, cache_dir: Path) -> Path:
    bench_dir = cache_dir / f"benchmark_{cfg.benchmark.seed}_{cfg.digest()[:6]}"
    if not (bench_dir / "split.json").exists():
        generate_benchmark(bench_dir, cfg.benchmark)
    return bench_dir


def _load_stage_model(cfg: ModelConfig, ckpt_path, stage: str) -> SketchLocalizer:
    ckpt = load_checkpoint(ckpt_path)
    if stage == STAGE_NO_ATTENTION:
        model = SketchLocalizer(replace(cfg, with_attention=False), seed=0)
    else:
        model = stage2_from_stage1(cfg, seed=0)
    restore(model, ckpt, strict=True)
    model.eval()
    return model


def _train_seed(cfg: CalibrationConfig, bench: Benchmark, seed: int,
                out_dir: Path) -> SeedArtifacts:
    dataset = TrainDataset(scenes=[r.scene for r in bench.train],
                           categories=tuple(sorted(bench.split.seen)))
    full_dir = out_dir / f"seed{seed}_full"
    nomr_dir = out_dir / f"seed{seed}_nomr"
    art = SeedArtifacts(
        seed=seed,
        stage1_ckpt=full_dir / f"{STAGE_NO_ATTENTION}.ckpt",
        stage2_ckpt=full_dir / f"{STAGE_WITH_ATTENTION}.ckpt",
        stage2_nomr_ckpt=nomr_dir / f"{STAGE_WITH_ATTENTION}.ckpt",
    )
    if not art.stage2_ckpt.exists():
        two_stage_train(cfg.model, dataset, replace(cfg.train, seed=seed), full_dir)
    if not art.stage2_nomr_ckpt.exists():
        two_stage_train(cfg.model, dataset,
                        replace(cfg.train, seed=seed, margin_rank_weight=0.0), nomr_dir)
    return art


def _eval_ap50(model, bench: Benchmark, categories, split: str, seed: int,
               noise: float, n_queries: int = 1, fusion: str = "feature",
               trained=None) -> EvalReport:
    return evaluate(model, bench.eval_scenes(), categories, split=split,
                    n_queries=n_queries, fusion=fusion, seed=seed,
                    sketch_noise=noise, trained_categories=trained,
                    scene_ids=bench.eval_ids())


def run_calibration(cfg: CalibrationConfig, work_dir) -> CalibrationResult:
    """Train and evaluate every arm; reuses checkpoints already in work_dir."""
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    bench_dir = _ensure_benchmark(cfg, work_dir)
    bench = load_benchmark(bench_dir)
    seen = sorted(bench.split.seen)
    unseen = sorted(bench.split.unseen)

    artifacts = [_train_seed(cfg, bench, s, work_dir) for s in cfg.seeds]

    reports: dict[str, EvalReport] = {}
    untrained = SketchLocalizer(cfg.model, seed=999)
    untrained.eval()
    reports["untrained_seen"] = _eval_ap50(
        untrained, bench, seen, "seen", cfg.eval_seed, cfg.eval_noise)

    seen_ap, seen_nomr, uns1, uns2 = {}, {}, {}, {}
    for art in artifacts:
        s = art.seed
        m_full = _load_stage_model(cfg.model, art.stage2_ckpt, STAGE_WITH_ATTENTION)
        m_nomr = _load_stage_model(cfg.model, art.stage2_nomr_ckpt, STAGE_WITH_ATTENTION)
        m_s1 = _load_stage_model(cfg.model, art.stage1_ckpt, STAGE_NO_ATTENTION)
        reports[f"seen_stage2_seed{s}"] = _eval_ap50(
            m_full, bench, seen, "seen", cfg.eval_seed, cfg.eval_noise)
        reports[f"seen_stage2_nomr_seed{s}"] = _eval_ap50(
            m_nomr, bench, seen, "seen", cfg.eval_seed, cfg.eval_noise)
        reports[f"unseen_stage1_seed{s}"] = _eval_ap50(
            m_s1, bench, unseen, "unseen", cfg.eval_seed, cfg.eval_noise, trained=seen)
        reports[f"unseen_stage2_seed{s}"] = _eval_ap50(
            m_full, bench, unseen, "unseen", cfg.eval_seed, cfg.eval_noise, trained=seen)
        seen_ap[s] = reports[f"seen_stage2_seed{s}"].ap50
        seen_nomr[s] = reports[f"seen_stage2_nomr_seed{s}"].ap50
        uns1[s] = reports[f"unseen_stage1_seed{s}"].ap50
        uns2[s] = reports[f"unseen_stage2_seed{s}"].ap50

    # multi-query sweep on the first seed's full model, seen split
    mq_model = _load_stage_model(cfg.model, artifacts[0].stage2_ckpt, STAGE_WITH_ATTENTION)
    mq: dict[str, list[float]] = {"N1": []}
    for n in cfg.multi_query_counts:
        for fusion in ("feature", "attention"):
            mq[f"N{n}_{fusion}"] = []
    for es in cfg.multi_query_eval_seeds:
        rep = _eval_ap50(mq_model, bench, seen, "seen", es, cfg.multi_query_noise)
        mq["N1"].append(rep.ap50)
        reports[f"mq_N1_seed{es}"] = rep
        for n in cfg.multi_query_counts:
            for fusion in ("feature", "attention"):
                rep = _eval_ap50(mq_model, bench, seen, "seen", es,
                                 cfg.multi_query_noise, n_queries=n, fusion=fusion)
                mq[f"N{n}_{fusion}"].append(rep.ap50)
                reports[f"mq_N{n}_{fusion}_seed{es}"] = rep

    result = CalibrationResult(
        config=cfg, benchmark_dir=bench_dir, artifacts=artifacts,
        untrained_seen_ap50=reports["untrained_seen"].ap50,
        seen_ap50=seen_ap, seen_ap50_nomr=seen_nomr,
        unseen_ap50_stage1=uns1, unseen_ap50_stage2=uns2,
        multi_query_ap50={k: float(np.mean(v)) for k, v in mq.items()},
        reports=reports)
    write_calibration_outputs(result, work_dir)
    return result


def write_calibration_outputs(result: CalibrationResult, out_dir: Path):
    """Summary CSV plus comparison figures (the report path of the CLI)."""
    out_dir = Path(out_dir)
    lines = ["arm,seed,ap50"]
    for arm, seed, ap in result.summary_rows():
        lines.append(f"{arm},{seed},{ap:.9g}")
    (out_dir / "calibration_summary.csv").write_text("\n".join(lines) + "\n")

    import matplotlib.pyplot as plt

    seeds = sorted(result.seen_ap50)
    x = np.arange(len(seeds))
    fig, (ax1, ax2, ax3) = plt.subplots(1, 3, figsize=(13, 3.6))
    width = 0.35
    ax1.bar(x - width / 2, [result.seen_ap50[s] for s in seeds], width, label="full loss")
    ax1.bar(x + width / 2, [result.seen_ap50_nomr[s] for s in seeds], width,
            label="no margin-rank")
    ax1.axhline(result.untrained_seen_ap50, color="k", ls="--", lw=0.8, label="untrained")
    ax1.set_xticks(x, [f"seed {s}" for s in seeds])
    ax1.set_ylabel("seen AP@50")
    ax1.set_title("margin-rank ablation")
    ax1.legend(fontsize=7)

    ax2.bar(x - width / 2, [result.unseen_ap50_stage1[s] for s in seeds], width,
            label="stage 1 (no attention)")
    ax2.bar(x + width / 2, [result.unseen_ap50_stage2[s] for s in seeds], width,
            label="stage 2 (attention)")
    ax2.set_xticks(x, [f"seed {s}" for s in seeds])
    ax2.set_ylabel("unseen AP@50")
    ax2.set_title("attention on the unseen split")
    ax2.legend(fontsize=7)

    names = sorted(result.multi_query_ap50)
    ax3.bar(np.arange(len(names)), [result.multi_query_ap50[n] for n in names],
            color="tab:green")
    ax3.set_xticks(np.arange(len(names)), names, rotation=30, ha="right", fontsize=7)
    ax3.axhline(result.multi_query_ap50["N1"], color="k", ls="--", lw=0.8)
    ax3.set_ylabel("seen AP@50")
    ax3.set_title(f"multi-query fusion, noise {result.config.multi_query_noise}")
    fig.tight_layout()
    fig.savefig(out_dir / "calibration_summary.png", dpi=120)
    plt.close(fig)
