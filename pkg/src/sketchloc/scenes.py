"""Synthetic scene generation: parametric shapes over textured backgrounds.

Ground-truth boxes are always the tight bounding box of the shape's own lit
pixels (under the pixel-square convention of :mod:`sketchloc.boxes`), so they
can be re-derived exactly from the rendered mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from matplotlib.path import Path as MplPath

from .boxes import Box, iou_matrix
from .sketches import sketch_categories

SHAPE_CATEGORIES = sketch_categories()


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 128
    min_objects: int = 1
    max_objects: int = 5
    min_scale: float = 22.0
    max_scale: float = 56.0
    max_overlap_iou: float = 0.3
    rotation_jitter_deg: float = 10.0
    eval_mode: bool = False  # pure-background scenes allowed only here


@dataclass
class SceneObject:
    category: str
    box: Box


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    objects: list[SceneObject]

    def __post_init__(self):
        h, w = self.image.shape[:2]
        for obj in self.objects:
            b = obj.box
            if not (0 <= b.x1 < b.x2 <= w and 0 <= b.y1 < b.y2 <= h):
                raise ValueError(f"box {b} outside {w}x{h} image bounds")

    @property
    def categories(self) -> tuple[str, ...]:
        return tuple(sorted({o.category for o in self.objects}))


@dataclass(frozen=True)
class CategorySplit:
    seen: frozenset[str]
    unseen: frozenset[str]

    def __post_init__(self):
        if self.seen & self.unseen:
            raise ValueError("seen and unseen categories overlap")


def split_categories(categories, seed: int, n_unseen: int) -> CategorySplit:
    """Deterministic disjoint seen/unseen split with |unseen| = n_unseen."""
    cats = sorted(set(categories))
    if not (0 <= n_unseen < len(cats)):
        raise ValueError(f"n_unseen must be in [0, {len(cats)}), got {n_unseen}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(cats))
    unseen = frozenset(cats[i] for i in order[:n_unseen])
    seen = frozenset(cats) - unseen
    return CategorySplit(seen=seen, unseen=unseen)


def _rot(points: np.ndarray, angle_deg: float, center) -> np.ndarray:
    a = math.radians(angle_deg)
    rotm = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    return (points - center) @ rotm.T + center


def _polygon_mask(vertices: np.ndarray, size: int) -> np.ndarray:
    lo = np.floor(vertices.min(axis=0)).astype(int) - 1
    hi = np.ceil(vertices.max(axis=0)).astype(int) + 1
    lo = np.clip(lo, 0, size)
    hi = np.clip(hi, 0, size)
    mask = np.zeros((size, size), dtype=bool)
    if (hi <= lo).any():
        return mask
    cols = np.arange(lo[0], hi[0])
    rows = np.arange(lo[1], hi[1])
    cc, rr = np.meshgrid(cols, rows)
    centers = np.stack([cc.ravel() + 0.5, rr.ravel() + 0.5], axis=1)
    inside = MplPath(vertices).contains_points(centers, radius=1e-9)
    mask[rr.ravel()[inside], cc.ravel()[inside]] = True
    return mask


def _disc_mask(center, radius: float, size: int, inner: float = 0.0) -> np.ndarray:
    cols = np.arange(size) + 0.5
    rows = np.arange(size) + 0.5
    dx = cols[None, :] - center[0]
    dy = rows[:, None] - center[1]
    d2 = dx * dx + dy * dy
    mask = d2 <= radius * radius
    if inner > 0:
        mask &= d2 >= inner * inner
    return mask


def render_shape_mask(category: str, center, scale: float, angle_deg: float, size: int) -> np.ndarray:
    """Boolean support mask of one shape; ``scale`` is its overall diameter/side."""
    cx, cy = float(center[0]), float(center[1])
    c = np.array([cx, cy])
    half = scale / 2.0
    if category == "disc":
        return _disc_mask(c, half, size)
    if category == "ring":
        return _disc_mask(c, half, size, inner=0.55 * half)
    if category == "square":
        v = np.array([(-half, -half), (half, -half), (half, half), (-half, half)]) + c
        return _polygon_mask(_rot(v, angle_deg, c), size)
    if category == "diamond":
        v = np.array([(0, -half), (half, 0), (0, half), (-half, 0)]) + c
        return _polygon_mask(_rot(v, angle_deg, c), size)
    if category == "triangle":
        r = half
        ang = -math.pi / 2 + np.arange(3) * 2 * math.pi / 3
        v = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1) + c
        return _polygon_mask(_rot(v, angle_deg, c), size)
    if category == "star":
        ang = -math.pi / 2 + np.arange(10) * math.pi / 5
        rad = np.where(np.arange(10) % 2 == 0, half, 0.42 * half)
        v = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1) + c
        return _polygon_mask(_rot(v, angle_deg, c), size)
    if category == "cross":
        arm = 0.3 * half
        h = half
        v = np.array([
            (-arm, -h), (arm, -h), (arm, -arm), (h, -arm), (h, arm), (arm, arm),
            (arm, h), (-arm, h), (-arm, arm), (-h, arm), (-h, -arm), (-arm, -arm),
        ]) + c
        return _polygon_mask(_rot(v, angle_deg, c), size)
    if category == "arrow":
        w = 0.22 * half
        v = np.array([
            (-half, -w), (0.15 * half, -w), (0.15 * half, -0.6 * half), (half, 0),
            (0.15 * half, 0.6 * half), (0.15 * half, w), (-half, w),
        ]) + c
        return _polygon_mask(_rot(v, angle_deg, c), size)
    raise ValueError(f"unknown shape category {category!r}; known: {', '.join(SHAPE_CATEGORIES)}")


def mask_bbox(mask: np.ndarray) -> Box | None:
    """Tight box around the lit pixels of a boolean mask, or None if empty."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if len(rows) == 0:
        return None
    return Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.08, 0.22, size=3)
    coarse = rng.uniform(0.0, 1.0, size=(5, 5))
    # bilinear upsample of the coarse grid gives a smooth low-frequency texture
    xs = np.linspace(0, 4, size)
    i0 = np.clip(xs.astype(int), 0, 3)
    f = xs - i0
    rowint = coarse[i0, :] * (1 - f[:, None]) + coarse[i0 + 1, :] * f[:, None]
    colint = rowint[:, i0] * (1 - f[None, :]) + rowint[:, i0 + 1] * f[None, :]
    img = base[None, None, :] + 0.12 * colint[:, :, None]
    img = img + rng.normal(0.0, 0.015, size=(size, size, 3))
    return np.clip(img, 0.0, 0.4)


def _object_color(rng: np.random.Generator) -> np.ndarray:
    color = rng.uniform(0.45, 1.0, size=3)
    color[rng.integers(0, 3)] = rng.uniform(0.75, 1.0)
    return color


def generate_scene(seed: int, categories, cfg: SceneConfig = SceneConfig()) -> Scene:
    """Render a deterministic multi-object scene for (seed, categories, cfg).

    Objects are placed by rejection sampling so that pairwise box IoU stays
    at or below cfg.max_overlap_iou. Later placements paint over earlier ones.
    """
    cats = sorted(set(categories))
    if not cats:
        raise ValueError("categories must be non-empty")
    unknown = [c for c in cats if c not in SHAPE_CATEGORIES]
    if unknown:
        raise ValueError(f"unknown categories {unknown}; known: {', '.join(SHAPE_CATEGORIES)}")
    if cfg.min_objects < 1 and not cfg.eval_mode:
        raise ValueError("object count 0 requires eval_mode")
    if cfg.min_objects > cfg.max_objects:
        raise ValueError("min_objects > max_objects")

    rng = np.random.default_rng(seed)
    size = cfg.image_size
    image = _background(rng, size)
    n_target = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    placed_boxes: list[Box] = []
    objects: list[SceneObject] = []

    for _ in range(n_target):
        for _attempt in range(40):
            category = cats[rng.integers(0, len(cats))]
            scale = rng.uniform(cfg.min_scale, cfg.max_scale)
            angle = rng.uniform(-cfg.rotation_jitter_deg, cfg.rotation_jitter_deg)
            margin = scale / 2.0 + 1.0
            if 2 * margin >= size:
                continue
            center = rng.uniform(margin, size - margin, size=2)
            mask = render_shape_mask(category, center, scale, angle, size)
            box = mask_bbox(mask)
            if box is None:
                continue
            if placed_boxes:
                overlaps = iou_matrix([box], placed_boxes)[0]
                if overlaps.max() > cfg.max_overlap_iou:
                    continue
            color = _object_color(rng)
            shade = np.clip(1.0 + rng.normal(0.0, 0.03, size=mask.sum()), 0.85, 1.15)
            image[mask] = np.clip(color[None, :] * shade[:, None], 0.45, 1.0)
            placed_boxes.append(box)
            objects.append(SceneObject(category=category, box=box))
            break

    if not objects and not cfg.eval_mode:
        raise RuntimeError(f"could not place any object (seed={seed})")
    return Scene(image=image, objects=objects)


def background_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> Scene:
    """Pure-background scene for evaluation stress tests."""
    rng = np.random.default_rng(seed)
    return Scene(image=_background(rng, cfg.image_size), objects=[])


def make_eval_config(cfg: SceneConfig = SceneConfig()) -> SceneConfig:
    return replace(cfg, eval_mode=True)
