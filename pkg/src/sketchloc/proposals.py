"""Query-conditioned region proposals: anchors, RPN heads, selection, ROI
pooling, and IoU-based foreground labeling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .boxes import Box, as_box_array, decode_boxes, encode_deltas, iou_matrix, nms
from .encoders import FeatureMap


@dataclass
class AnchorGrid:
    boxes: np.ndarray  # (w*h*S*R, 4), cell-major then scale-major then ratio
    scales: tuple[float, ...]
    ratios: tuple[float, ...]
    stride: int
    grid_w: int
    grid_h: int

    @property
    def per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)


def generate_anchors(w: int, h: int, stride: int, scales, ratios) -> AnchorGrid:
    """One anchor per (cell, scale, ratio), centered on feature-cell centers.

    Anchor width = scale * sqrt(ratio), height = scale / sqrt(ratio).
    """
    scales = tuple(float(s) for s in scales)
    ratios = tuple(float(r) for r in ratios)
    if not scales or not ratios:
        raise ValueError("scales and ratios must be non-empty")
    widths = np.array([s * math.sqrt(r) for s in scales for r in ratios])
    heights = np.array([s / math.sqrt(r) for s in scales for r in ratios])
    cx = (np.arange(w) + 0.5) * stride
    cy = (np.arange(h) + 0.5) * stride
    ccx, ccy = np.meshgrid(cx, cy)  # (h, w)
    centers = np.stack([ccx.ravel(), ccy.ravel()], axis=1)  # cell-major (row then col)
    boxes = np.empty((w * h * len(widths), 4), dtype=np.float64)
    k = 0
    for c in centers:
        boxes[k:k + len(widths), 0] = c[0] - widths / 2
        boxes[k:k + len(widths), 1] = c[1] - heights / 2
        boxes[k:k + len(widths), 2] = c[0] + widths / 2
        boxes[k:k + len(widths), 3] = c[1] + heights / 2
        k += len(widths)
    return AnchorGrid(boxes=boxes, scales=scales, ratios=ratios, stride=stride, grid_w=w, grid_h=h)


class RpnHead(nn.Module):
    """3x3 conv trunk with two 1x1 heads: objectness logits and box deltas."""

    def __init__(self, depth: int, anchors_per_cell: int, hidden: int = 64):
        super().__init__()
        self.trunk = nn.Conv2d(depth, hidden, kernel_size=3, padding=1)
        self.objectness = nn.Conv2d(hidden, anchors_per_cell, kernel_size=1)
        self.deltas = nn.Conv2d(hidden, 4 * anchors_per_cell, kernel_size=1)
        self.anchors_per_cell = anchors_per_cell

    def forward(self, fm: FeatureMap) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (logits (N,), deltas (N, 4)) in AnchorGrid order."""
        x = torch.relu(self.trunk(fm.data.unsqueeze(0)))
        a = self.anchors_per_cell
        logits = self.objectness(x).squeeze(0)             # (A, H, W)
        deltas = self.deltas(x).squeeze(0)                 # (4A, H, W)
        logits = logits.permute(1, 2, 0).reshape(-1)       # cell-major, anchor within cell
        h, w = fm.height, fm.width
        deltas = deltas.reshape(a, 4, h, w).permute(2, 3, 0, 1).reshape(-1, 4)
        return logits, deltas


@dataclass
class ProposalConfig:
    pre_nms_top: int = 256
    nms_iou: float = 0.7
    post_nms: int = 64


TRAIN_PROPOSALS = ProposalConfig(pre_nms_top=256, nms_iou=0.7, post_nms=64)
EVAL_PROPOSALS = ProposalConfig(pre_nms_top=600, nms_iou=0.7, post_nms=100)


@dataclass
class Proposal:
    box: Box
    objectness: float
    label: int | None = None
    roi_features: torch.Tensor | None = field(default=None, repr=False)


def select_proposals(boxes: np.ndarray, objectness: np.ndarray,
                     cfg: ProposalConfig = TRAIN_PROPOSALS) -> list[Proposal]:
    """Top-k by objectness, greedy NMS, truncate: the standard funnel."""
    boxes = as_box_array(boxes)
    objectness = np.asarray(objectness, dtype=np.float64)
    if len(boxes) != len(objectness):
        raise ValueError(f"{len(boxes)} boxes but {len(objectness)} scores")
    if len(boxes) == 0:
        return []
    order = np.lexsort((np.arange(len(objectness)), -objectness))[:cfg.pre_nms_top]
    kept = nms(boxes[order], objectness[order], cfg.nms_iou)[:cfg.post_nms]
    chosen = order[kept]
    return [Proposal(box=Box.from_array(boxes[i]), objectness=float(objectness[i]))
            for i in chosen]


def _bin_ranges(edges_lo: np.ndarray, edges_hi: np.ndarray, n_cells: int):
    """Integer cell ranges per bin: floor/ceil on the fractional edges, with
    empty bins snapping to the cell nearest their center. Vectorized over an
    (N, out) grid of bins."""
    starts = np.clip(np.floor(edges_lo).astype(int), 0, n_cells - 1)
    ends = np.clip(np.ceil(edges_hi).astype(int), 1, n_cells)
    empty = starts >= ends
    if empty.any():
        center = np.clip(np.floor((edges_lo + edges_hi) / 2).astype(int), 0, n_cells - 1)
        starts = np.where(empty, center, starts)
        ends = np.where(empty, center + 1, ends)
    return starts, ends


def _axis_edges(lo: np.ndarray, hi: np.ndarray, out_size: int):
    frac = np.arange(out_size + 1) / out_size
    edges = lo[:, None] + (hi - lo)[:, None] * frac[None, :]
    return edges[:, :-1], edges[:, 1:]


def roi_pool(fm: FeatureMap, boxes, out_size: int = 4) -> torch.Tensor:
    """Max-pool each box's feature-map region into an out_size x out_size grid.

    Boxes are in image pixels; they are mapped to feature coordinates by the
    map's stride, partitioned into out_size bins per axis (floor/ceil on the
    fractional edges), and each bin takes the channelwise max of its cells.
    A bin left empty by the floor/ceil snap falls back to the cell nearest
    its center. Differentiable with respect to ``fm.data``.
    """
    if out_size < 1:
        raise ValueError(f"out_size must be >= 1, got {out_size}")
    boxes = as_box_array(boxes)
    h, w = fm.height, fm.width
    coords = boxes / fm.stride
    outside = (coords[:, 2] <= 0) | (coords[:, 3] <= 0) | (coords[:, 0] >= w) | (coords[:, 1] >= h)
    if outside.any():
        bi = int(np.flatnonzero(outside)[0])
        raise ValueError(f"box {bi} ({boxes[bi].tolist()}) lies outside the feature extent")

    cs, ce = _bin_ranges(*_axis_edges(coords[:, 0], coords[:, 2], out_size), w)  # (N, out)
    rs, re = _bin_ranges(*_axis_edges(coords[:, 1], coords[:, 3], out_size), h)

    data = fm.data
    # column-range max table: table[s, :, :, e-1] = max(data[..., s:e]).
    # O(W^2) memory is cheap at desk-scale map sizes and makes the per-bin
    # column max a single differentiable gather.
    strips = []
    for s in range(w):
        run = torch.cummax(data[:, :, s:], dim=-1).values
        if s:
            strips.append(torch.cat([run.new_zeros(data.shape[0], h, s), run], dim=-1))
        else:
            strips.append(run)
    table = torch.stack(strips)                                   # (W, C, H, W)
    stage1 = table[torch.from_numpy(cs), :, :, torch.from_numpy(ce - 1)]  # (N, out_j, C, H)

    idx_h = np.arange(h)
    row_mask = (idx_h >= rs[..., None]) & (idx_h < re[..., None])  # (N, out_i, H)
    rmask = torch.from_numpy(row_mask).unsqueeze(2).unsqueeze(3)   # (N, out_i, 1, 1, H)
    neg_inf = torch.finfo(data.dtype).min
    stage2 = torch.where(rmask, stage1.unsqueeze(1), neg_inf).amax(dim=-1)
    return stage2.permute(0, 3, 1, 2)  # (N, C, out_i, out_j)


def label_proposals(proposals, scene, query_category: str, iou_thresh: float = 0.5) -> np.ndarray:
    """y_k = 1 iff the proposal overlaps a ground-truth box of the query
    category with IoU >= iou_thresh; other categories never count."""
    boxes = [p.box if isinstance(p, Proposal) else p for p in proposals]
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    gt = [o.box for o in scene.objects if o.category == query_category]
    if not gt:
        return np.zeros(len(boxes), dtype=np.int64)
    overlap = iou_matrix(boxes, gt).max(axis=1)
    return (overlap >= iou_thresh).astype(np.int64)


@dataclass
class RpnTargets:
    labels: np.ndarray         # (N,) in {-1 ignore, 0 negative, 1 positive}
    delta_targets: np.ndarray  # (N, 4); meaningful only where labels == 1


def rpn_targets(anchors: AnchorGrid, gt_boxes, rng: np.random.Generator,
                pos_iou: float = 0.7, neg_iou: float = 0.3,
                sample_size: int = 32) -> RpnTargets:
    """Anchor-level objectness/box targets, Faster R-CNN convention.

    Positive anchors overlap any ground-truth box (any category) with IoU >=
    pos_iou, or are the single best anchor for a ground truth; negatives fall
    below neg_iou against all. Up to sample_size anchors are kept, balanced
    1:1; the rest are ignored.
    """
    n = len(anchors.boxes)
    labels = np.full(n, -1, dtype=np.int64)
    deltas = np.zeros((n, 4), dtype=np.float64)
    gt = as_box_array(gt_boxes) if len(gt_boxes) else np.zeros((0, 4))
    if len(gt) == 0:
        neg = rng.permutation(n)[:sample_size]
        labels[neg] = 0
        return RpnTargets(labels=labels, delta_targets=deltas)

    overlaps = iou_matrix(anchors.boxes, gt)  # (N, G)
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(n), best_gt]
    labels[best_iou < neg_iou] = 0
    labels[best_iou >= pos_iou] = 1
    # every ground truth claims its best-overlapping anchor
    labels[overlaps.argmax(axis=0)] = 1

    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    n_pos = min(len(pos), sample_size // 2)
    keep_pos = rng.permutation(pos)[:n_pos]
    keep_neg = rng.permutation(neg)[:sample_size - n_pos]
    labels[:] = -1
    labels[keep_neg] = 0
    labels[keep_pos] = 1
    if len(keep_pos):
        deltas[keep_pos] = encode_deltas(anchors.boxes[keep_pos], gt[best_gt[keep_pos]])
    return RpnTargets(labels=labels, delta_targets=deltas)


def decode_proposal_boxes(anchors: AnchorGrid, deltas: np.ndarray, image_size):
    """Decode RPN deltas against the anchor grid, clipped to the image."""
    return decode_boxes(anchors.boxes, deltas, image_size)
