"""Stroke sketches: parsing, serialization, rasterization, and synthetic generation.

Stroke files are newline-delimited JSON records compatible with the public
simplified-drawing distribution: ``{"word": <category>, "drawing":
[[[x0,x1,...],[y0,y1,...]], ...]}`` with integer coordinates in 0-255. The
parser rescales every record to the normalized [0,1]^2 canvas by the record's
own stroke bounding box.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

QUANT_LEVELS = 255


class StrokeFileError(ValueError):
    pass


@dataclass
class StrokeSketch:
    """A category-labeled list of polylines in normalized [0,1]^2 coordinates."""

    category: str
    strokes: list[np.ndarray]  # each (P, 2) float array of (x, y) points, P >= 2

    def __post_init__(self):
        if len(self.strokes) == 0:
            raise ValueError("sketch must contain at least one stroke")
        norm = []
        for i, s in enumerate(self.strokes):
            s = np.asarray(s, dtype=np.float64)
            if s.ndim != 2 or s.shape[1] != 2 or s.shape[0] < 2:
                raise ValueError(f"stroke {i} must be a (P>=2, 2) point array, got {s.shape}")
            if not np.all(np.isfinite(s)):
                raise ValueError(f"stroke {i} contains non-finite coordinates")
            if s.min() < 0.0 or s.max() > 1.0:
                raise ValueError(f"stroke {i} has points outside [0,1]^2")
            norm.append(s)
        self.strokes = norm


@dataclass
class RasterSketch:
    """A square binary raster of a sketch, values in {0, 1}."""

    pixels: np.ndarray  # (H, W) float
    category: str

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2 or self.pixels.shape[0] != self.pixels.shape[1]:
            raise ValueError(f"raster must be square, got shape {self.pixels.shape}")
        if not (self.pixels > 0).any():
            raise ValueError("raster has no lit pixels")


@dataclass
class StrokeParseResult:
    sketches: list[StrokeSketch] = field(default_factory=list)
    skipped: int = 0


def _record_to_sketch(record: dict) -> StrokeSketch | None:
    """Normalize one record to [0,1]^2 by its overall stroke bounding box.

    Returns None for drawings whose bounding box has zero extent in both axes
    (nothing to normalize). A zero-extent single axis maps to the canvas
    center of that axis.
    """
    word = record["word"]
    drawing = record["drawing"]
    if not isinstance(drawing, list) or len(drawing) == 0:
        return None
    strokes = []
    for stroke in drawing:
        xs, ys = stroke
        if len(xs) != len(ys):
            raise ValueError("stroke coordinate arrays differ in length")
        pts = np.stack([np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)], axis=1)
        if pts.shape[0] < 2:
            pts = np.repeat(pts, 2, axis=0) if pts.shape[0] == 1 else None
            if pts is None:
                raise ValueError("empty stroke")
        strokes.append(pts)
    allpts = np.concatenate(strokes)
    lo = allpts.min(axis=0)
    hi = allpts.max(axis=0)
    extent = hi - lo
    if np.all(extent == 0):
        return None
    out = []
    for pts in strokes:
        q = np.empty_like(pts)
        for ax in range(2):
            if extent[ax] == 0:
                q[:, ax] = 0.5
            else:
                q[:, ax] = (pts[:, ax] - lo[ax]) / extent[ax]
        out.append(q)
    return StrokeSketch(category=str(word), strokes=out)


def parse_stroke_file(data: bytes) -> StrokeParseResult:
    """Parse a newline-delimited stroke file into StrokeSketch records.

    Raises StrokeFileError naming the 1-based line number of the first
    malformed record. Records with an empty or fully degenerate drawing are
    skipped and counted in ``result.skipped``.
    """
    result = StrokeParseResult()
    for lineno, raw in enumerate(data.decode("utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            record = json.loads(raw)
            if "word" not in record or "drawing" not in record:
                raise ValueError("record missing 'word' or 'drawing'")
            sketch = _record_to_sketch(record)
        except (ValueError, KeyError, TypeError) as exc:
            raise StrokeFileError(f"line {lineno}: malformed stroke record ({exc})") from exc
        if sketch is None:
            result.skipped += 1
        else:
            result.sketches.append(sketch)
    return result


def write_stroke_file(sketches: list[StrokeSketch]) -> bytes:
    """Serialize sketches to the stroke file format, quantizing to 0-255 ints."""
    lines = []
    for sk in sketches:
        drawing = []
        for s in sk.strokes:
            q = np.floor(s * QUANT_LEVELS + 0.5).astype(int)
            drawing.append([q[:, 0].tolist(), q[:, 1].tolist()])
        lines.append(json.dumps({"word": sk.category, "drawing": drawing}))
    return ("\n".join(lines) + "\n").encode("utf-8")


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(np.int64)


def line_pixels(r0: int, c0: int, r1: int, c1: int) -> np.ndarray:
    """Integer line walk from (r0, c0) to (r1, c1), inclusive.

    Steps n = max(|dr|, |dc|) times and rounds the ideal position at each
    step (half-up). Returns a (K, 2) array of unique (row, col) pixels in
    walk order.
    """
    dr = r1 - r0
    dc = c1 - c0
    n = max(abs(dr), abs(dc))
    if n == 0:
        return np.array([[r0, c0]], dtype=np.int64)
    i = np.arange(n + 1, dtype=np.float64)
    rows = r0 + _round_half_up(i * dr / n)
    cols = c0 + _round_half_up(i * dc / n)
    pts = np.stack([rows, cols], axis=1)
    # consecutive duplicates cannot occur (one axis steps each i)
    return pts


def rasterize_sketch(sk: StrokeSketch, size: int = 64) -> RasterSketch:
    """Draw the sketch as 1-px-wide binary lines on a size x size canvas.

    Normalized coordinates map into the canvas with a 10% margin inset:
    col = m + round(x * (size - 1 - 2m)), row likewise for y, where
    m = round(0.1 * size).
    """
    if size < 8:
        raise ValueError(f"raster size must be >= 8, got {size}")
    margin = int(math.floor(0.1 * size + 0.5))
    span = size - 1 - 2 * margin
    canvas = np.zeros((size, size), dtype=np.float64)
    for s in sk.strokes:
        cols = margin + _round_half_up(s[:, 0] * span)
        rows = margin + _round_half_up(s[:, 1] * span)
        for k in range(len(s) - 1):
            px = line_pixels(int(rows[k]), int(cols[k]), int(rows[k + 1]), int(cols[k + 1]))
            canvas[px[:, 0], px[:, 1]] = 1.0
    return RasterSketch(pixels=canvas, category=sk.category)


def _circle(cx, cy, r, n, phase=-0.5 * math.pi):
    ang = phase + np.linspace(0.0, 2.0 * math.pi, n + 1)
    return np.stack([cx + r * np.cos(ang), cy + r * np.sin(ang)], axis=1)


def _star(cx, cy, r_out, r_in, points=5):
    ang = -0.5 * math.pi + np.arange(2 * points + 1) * math.pi / points
    rad = np.where(np.arange(2 * points + 1) % 2 == 0, r_out, r_in)
    return np.stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang)], axis=1)


def _cross_outline(cx, cy, half, arm):
    a, h = arm, half
    pts = [
        (-a, -h), (a, -h), (a, -a), (h, -a), (h, a), (a, a),
        (a, h), (-a, h), (-a, a), (-h, a), (-h, -a), (-a, -a), (-a, -h),
    ]
    return np.array([(cx + x, cy + y) for x, y in pts])


SKETCH_TEMPLATES: dict[str, list[np.ndarray]] = {
    "disc": [_circle(0.5, 0.5, 0.40, 16)],
    "ring": [_circle(0.5, 0.5, 0.40, 16), _circle(0.5, 0.5, 0.20, 12)],
    "square": [np.array([(0.1, 0.1), (0.9, 0.1), (0.9, 0.9), (0.1, 0.9), (0.1, 0.1)])],
    "diamond": [np.array([(0.5, 0.08), (0.92, 0.5), (0.5, 0.92), (0.08, 0.5), (0.5, 0.08)])],
    "triangle": [np.array([(0.5, 0.1), (0.9, 0.88), (0.1, 0.88), (0.5, 0.1)])],
    "star": [_star(0.5, 0.52, 0.42, 0.17)],
    "cross": [_cross_outline(0.5, 0.5, 0.4, 0.13)],
    "arrow": [
        np.array([(0.1, 0.5), (0.88, 0.5)]),
        np.array([(0.58, 0.22), (0.9, 0.5), (0.58, 0.78)]),
    ],
}


def sketch_categories() -> tuple[str, ...]:
    return tuple(sorted(SKETCH_TEMPLATES))


def generate_sketch(seed: int, category: str, noise: float) -> StrokeSketch:
    """Jitter the category's canonical stroke template.

    Each stroke gets a Gaussian offset (sigma 0.15 * noise) and each point an
    independent Gaussian jitter (sigma 0.2 * noise); points are clamped to
    [0,1]^2. Above noise 0.5, whole strokes drop out with probability
    (noise - 0.5) each, keeping at least one.
    """
    if category not in SKETCH_TEMPLATES:
        known = ", ".join(sketch_categories())
        raise ValueError(f"unknown sketch category {category!r}; known: {known}")
    if not (0.0 <= noise <= 1.0):
        raise ValueError(f"noise must be in [0, 1], got {noise}")
    rng = np.random.default_rng(seed)
    jittered = []
    kept = []
    for template in SKETCH_TEMPLATES[category]:
        offset = rng.normal(0.0, 0.15 * noise, size=2)
        jitter = rng.normal(0.0, 0.2 * noise, size=template.shape)
        pts = np.clip(template + offset + jitter, 0.0, 1.0)
        keep = True
        if noise > 0.5:
            keep = rng.uniform() >= (noise - 0.5)
        jittered.append(pts)
        kept.append(keep)
    strokes = [s for s, k in zip(jittered, kept) if k]
    if not strokes:
        strokes = [jittered[0]]
    return StrokeSketch(category=category, strokes=strokes)
