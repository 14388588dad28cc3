"""Axis-aligned box primitives: IoU, delta encoding/decoding, greedy NMS.

Boxes are (x1, y1, x2, y2) in continuous pixel coordinates with x1 < x2 and
y1 < y2. A pixel (row r, col c) occupies the unit square [c, c+1] x [r, r+1],
so the tight box around a single lit pixel is (c, r, c+1, r+1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box coordinates must be finite, got {vals}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {vals}: need x1 < x2 and y1 < y2")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "Box":
        return Box(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


def as_box_array(boxes) -> np.ndarray:
    """Coerce a Box, a sequence of Boxes, or an array-like to an (N, 4) float array."""
    if isinstance(boxes, Box):
        return boxes.as_array()[None, :]
    if isinstance(boxes, np.ndarray):
        arr = boxes.astype(np.float64, copy=False)
    elif len(boxes) > 0 and isinstance(boxes[0], Box):
        arr = np.stack([b.as_array() for b in boxes])
    else:
        arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape[-1] != 4:
        raise ValueError(f"expected (N, 4) boxes, got shape {arr.shape}")
    return arr


def box_areas(boxes: np.ndarray) -> np.ndarray:
    boxes = as_box_array(boxes)
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two boxes, in [0, 1]."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two box sets, shape (len(a), len(b))."""
    a = as_box_array(a)
    b = as_box_array(b)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    union = box_areas(a)[:, None] + box_areas(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def encode_deltas(anchors, targets) -> np.ndarray:
    """Encode target boxes as (dx, dy, dw, dh) deltas relative to anchors.

    Center shifts are scaled by anchor size; log-size ratios for width/height.
    """
    anchors = as_box_array(anchors)
    targets = as_box_array(targets)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tx = targets[:, 0] + 0.5 * tw
    ty = targets[:, 1] + 0.5 * th
    return np.stack([(tx - ax) / aw, (ty - ay) / ah, np.log(tw / aw), np.log(th / ah)], axis=1)


def decode_boxes(anchors, deltas, image_size=None):
    """Apply deltas to anchors; optionally clip to image bounds and drop slivers.

    With ``image_size=(W, H)`` boxes are clipped to [0, W] x [0, H] and any box
    with a side shorter than 1 px after clipping is dropped. Returns
    ``(boxes (M, 4), kept_indices (M,))``. With ``image_size=None`` the raw
    decode is returned (all indices kept), which makes
    decode(anchors, encode(anchors, t)) the identity on t.
    """
    anchors = as_box_array(anchors)
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.shape != anchors.shape:
        raise ValueError(f"deltas shape {deltas.shape} != anchors shape {anchors.shape}")
    if not np.all(np.isfinite(deltas)):
        bad = int(np.argwhere(~np.isfinite(deltas).all(axis=1))[0][0])
        raise ValueError(f"non-finite delta at index {bad}: {deltas[bad]}")

    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    cx = anchors[:, 0] + 0.5 * aw + deltas[:, 0] * aw
    cy = anchors[:, 1] + 0.5 * ah + deltas[:, 1] * ah
    w = aw * np.exp(deltas[:, 2])
    h = ah * np.exp(deltas[:, 3])
    boxes = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)

    if image_size is None:
        return boxes, np.arange(len(boxes))
    boxes = clip_boxes(boxes, image_size)
    keep = (boxes[:, 2] - boxes[:, 0] >= 1.0) & (boxes[:, 3] - boxes[:, 1] >= 1.0)
    return boxes[keep], np.flatnonzero(keep)


def clip_boxes(boxes, image_size) -> np.ndarray:
    w, h = image_size
    boxes = as_box_array(boxes).copy()
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, float(w))
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, float(h))
    return boxes


def nms(boxes, scores, iou_thresh: float) -> list[int]:
    """Greedy non-maximum suppression.

    Repeatedly keeps the highest-scoring remaining box and suppresses the
    remaining boxes with IoU > iou_thresh against it. Score ties are broken by
    lower index. Returns kept indices sorted by descending score.
    """
    boxes = as_box_array(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(boxes):
        raise ValueError(f"{len(boxes)} boxes but {len(scores)} scores")
    if not (0.0 < iou_thresh <= 1.0):
        raise ValueError(f"iou_thresh must be in (0, 1], got {iou_thresh}")
    if len(boxes) == 0:
        return []
    # lexsort is stable: index ascending within equal scores
    order = np.lexsort((np.arange(len(scores)), -scores))
    ious = iou_matrix(boxes, boxes)
    alive = np.ones(len(boxes), dtype=bool)
    kept = []
    for i in order:
        if not alive[i]:
            continue
        kept.append(int(i))
        alive &= ious[i] <= iou_thresh
        alive[i] = False
    return kept
