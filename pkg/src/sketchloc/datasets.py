"""Benchmark assembly: disjoint-split scene pools plus a browsable sketch
file, written as scene archives under one directory."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .archive import (SceneRecord, read_scene_archive, read_split,
                      write_scene_archive, write_split, SPLIT_NAME)
from .scenes import CategorySplit, SceneConfig, generate_scene, split_categories
from .sketches import generate_sketch, sketch_categories, write_stroke_file

TRAIN_DIR = "train"
EVAL_DIR = "eval"
SKETCH_FILE = "sketches.ndjson"


@dataclass(frozen=True)
class BenchmarkSpec:
    seed: int = 0
    n_train_scenes: int = 2000
    n_eval_scenes: int = 150
    n_sketches_per_category: int = 8
    n_unseen: int = 2
    categories: tuple[str, ...] = field(default_factory=sketch_categories)
    scene: SceneConfig = SceneConfig()
    sketch_noise: float = 0.4


def _scene_pool(tag: int, spec: BenchmarkSpec, categories, count: int) -> list[SceneRecord]:
    rng = np.random.default_rng((spec.seed, tag))
    seeds = rng.integers(0, 2 ** 31, size=count)
    records = []
    for i, s in enumerate(seeds):
        scene = generate_scene(int(s), categories, spec.scene)
        records.append(SceneRecord(scene_id=f"{'te' if tag else 'tr'}{i:05d}",
                                   seed=int(s), scene=scene))
    return records


def generate_benchmark(out_dir, spec: BenchmarkSpec = BenchmarkSpec()) -> Path:
    """Write split.json, the train archive (seen categories only), the eval
    archive (all categories) and a browsable sketch file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    split = split_categories(spec.categories, spec.seed, spec.n_unseen)
    write_split(split, spec.seed, out_dir / SPLIT_NAME)
    train = _scene_pool(0, spec, sorted(split.seen), spec.n_train_scenes)
    write_scene_archive(train, out_dir / TRAIN_DIR)
    eval_pool = _scene_pool(1, spec, sorted(spec.categories), spec.n_eval_scenes)
    write_scene_archive(eval_pool, out_dir / EVAL_DIR)

    rng = np.random.default_rng((spec.seed, 2))
    sketches = []
    for cat in sorted(spec.categories):
        for _ in range(spec.n_sketches_per_category):
            sketches.append(generate_sketch(int(rng.integers(0, 2 ** 31)), cat,
                                            spec.sketch_noise))
    (out_dir / SKETCH_FILE).write_bytes(write_stroke_file(sketches))
    return out_dir


@dataclass
class Benchmark:
    split: CategorySplit
    train: list[SceneRecord]
    eval: list[SceneRecord]

    def eval_scenes(self):
        return [r.scene for r in self.eval]

    def eval_ids(self):
        return [r.scene_id for r in self.eval]


def load_benchmark(directory) -> Benchmark:
    directory = Path(directory)
    return Benchmark(
        split=read_split(directory / SPLIT_NAME),
        train=read_scene_archive(directory / TRAIN_DIR),
        eval=read_scene_archive(directory / EVAL_DIR),
    )
