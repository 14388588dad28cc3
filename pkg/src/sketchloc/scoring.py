"""Proposal scoring against the sketch query, and the training losses:
foreground margin loss, pairwise margin-rank loss, auxiliary cross-entropy,
and box regression."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .encoders import FeatureMap, global_mean_pool

M_PLUS = 0.3
M_MINUS = 0.7


@dataclass
class ScoredProposals:
    """Per-proposal outputs of the scoring head.

    class_logits is the pre-sigmoid logit of ``a``: the foreground/background
    classifier and the ranking score are one head, so the cross-entropy term
    keeps pushing a toward the query-dependent label even inside the margin
    corridor (m_plus, m_minus) where the hinge losses go silent.
    """

    a: torch.Tensor            # (N,) foreground probabilities in (0, 1)
    class_logits: torch.Tensor  # (N,)
    refine_deltas: torch.Tensor  # (N, 4)


class ScoringHead(nn.Module):
    """Θ on the concatenated [mean(roi); mean(sketch)] vector: a fully
    connected trunk with a sigmoid foreground output and a sibling
    box-refinement head, plus a bilinear shortcut on the logit.

    Desk-scale conditioning, all parameter-free functions of the inputs:
    ROI vectors are centered against the whole image's mean feature vector
    (relative-to-scene features), both halves are standardized per vector
    (the raw branches carry a near-identical common activation mode across
    categories that otherwise drowns the cross-modal signal), and their
    elementwise product joins the trunk input. The bilinear term
    <P_r roi, P_s sketch> gives SGD a well-conditioned path to the matching
    solution; the trunk handles the rest.
    """

    def __init__(self, depth: int, normalize_inputs: bool = True):
        super().__init__()
        self.fc = nn.Linear(3 * depth, depth)
        self.score = nn.Linear(depth, 1)
        self.refine = nn.Linear(depth, 4)
        self.proj_roi = nn.Linear(depth, depth)
        self.proj_sketch = nn.Linear(depth, depth)
        self.depth = depth
        self.normalize_inputs = normalize_inputs

    @staticmethod
    def _standardize(x: torch.Tensor) -> torch.Tensor:
        return (x - x.mean(dim=1, keepdim=True)) / (x.std(dim=1, keepdim=True) + 1e-6)

    def forward(self, rois: torch.Tensor, sketch,
                image_context: torch.Tensor | None = None) -> ScoredProposals:
        """rois: (N, d, s, s) pooled features; sketch: FeatureMap or (d,)
        vector; image_context: optional (d,) global mean of the full map."""
        if rois.ndim != 4 or rois.shape[1] != self.depth:
            raise ValueError(f"expected (N, {self.depth}, s, s) rois, got {tuple(rois.shape)}")
        sketch_vec = global_mean_pool(sketch) if isinstance(sketch, FeatureMap) else sketch
        if sketch_vec.shape[0] != self.depth:
            raise ValueError(
                f"depth mismatch: rois d={self.depth}, sketch d={sketch_vec.shape[0]}")
        g_roi = rois.mean(dim=(2, 3))                       # (N, d)
        g_sk = sketch_vec.unsqueeze(0).expand(len(g_roi), -1)
        if image_context is not None:
            g_roi = g_roi - image_context.unsqueeze(0)
        if self.normalize_inputs:
            g_roi = self._standardize(g_roi)
            g_sk = self._standardize(g_sk)
        hidden = torch.relu(self.fc(torch.cat([g_roi, g_sk, g_roi * g_sk], dim=1)))
        logits = (self.score(hidden).squeeze(1)
                  + (self.proj_roi(g_roi) * self.proj_sketch(g_sk)).sum(dim=1) / self.depth)
        return ScoredProposals(
            a=torch.sigmoid(logits),
            class_logits=logits,
            refine_deltas=self.refine(hidden),
        )


def _check_margin_args(a, y):
    a = a if torch.is_tensor(a) else torch.as_tensor(a, dtype=torch.float64)
    y = y if torch.is_tensor(y) else torch.as_tensor(y)
    if a.shape != y.shape:
        raise ValueError(f"a has shape {tuple(a.shape)} but y has shape {tuple(y.shape)}")
    if not torch.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return a, y.to(a.dtype)


def margin_loss(a, y, m_plus: float = M_PLUS, m_minus: float = M_MINUS,
                reduce_mean: bool = False) -> torch.Tensor:
    """Hinge penalties pushing foreground scores above m_plus and background
    scores below m_minus; sums over proposals unless reduce_mean."""
    a, y = _check_margin_args(a, y)
    per = y * torch.clamp(m_plus - a, min=0) + (1 - y) * torch.clamp(a - m_minus, min=0)
    return per.mean() if reduce_mean and len(per) else per.sum()


def margin_rank_loss(a, y, m_plus: float = M_PLUS, m_minus: float = M_MINUS,
                     reduce_mean: bool = False) -> torch.Tensor:
    """Pairwise ranking hinge over ordered proposal pairs (k < l).

    Same-label pairs pay for score gaps beyond m_minus; different-label pairs
    pay for gaps narrower than m_plus.
    """
    a, y = _check_margin_args(a, y)
    n = len(a)
    if n < 2:
        return a.new_zeros(())
    diff = (a.unsqueeze(0) - a.unsqueeze(1)).abs()
    same = y.unsqueeze(0) == y.unsqueeze(1)
    upper = torch.triu(torch.ones(n, n, dtype=torch.bool, device=a.device), diagonal=1)
    per = torch.where(same, torch.clamp(diff - m_minus, min=0),
                      torch.clamp(m_plus - diff, min=0))[upper]
    return per.mean() if reduce_mean else per.sum()


def smooth_l1(pred: torch.Tensor, target: torch.Tensor, reduce_mean: bool = False) -> torch.Tensor:
    diff = (pred - target).abs()
    per = torch.where(diff < 1.0, 0.5 * diff * diff, diff - 0.5)
    return per.mean() if reduce_mean and per.numel() else per.sum()


@dataclass(frozen=True)
class LossWeights:
    margin: float = 1.0
    margin_rank: float = 1.0
    cross_entropy: float = 1.0
    box_reg: float = 1.0
    rpn_objectness: float = 1.0
    rpn_box: float = 1.0
    m_plus: float = M_PLUS
    m_minus: float = M_MINUS
    reduce_mean: bool = False


@dataclass
class LossBreakdown:
    margin: float
    margin_rank: float
    cross_entropy: float
    box_reg: float
    rpn_objectness: float
    rpn_box: float
    total: float

    FIELDS = ("margin", "margin_rank", "cross_entropy", "box_reg",
              "rpn_objectness", "rpn_box", "total")

    def as_tuple(self):
        return tuple(getattr(self, f) for f in self.FIELDS)


def total_loss(scored: ScoredProposals, labels: torch.Tensor,
               box_delta_targets: torch.Tensor | None,
               rpn_logits: torch.Tensor, rpn_delta_preds: torch.Tensor,
               rpn_labels: torch.Tensor, rpn_delta_targets: torch.Tensor,
               weights: LossWeights = LossWeights()) -> tuple[torch.Tensor, LossBreakdown]:
    """Weighted sum of all training terms.

    ``box_delta_targets`` holds refinement targets per proposal (rows for
    background proposals are ignored); None or no foreground proposals gives
    a zero box term. RPN anchors labeled -1 are excluded from both RPN terms.
    """
    w = weights
    rm = w.reduce_mean
    l_margin = margin_loss(scored.a, labels, w.m_plus, w.m_minus, reduce_mean=rm)
    l_rank = margin_rank_loss(scored.a, labels, w.m_plus, w.m_minus, reduce_mean=rm)

    y = labels.to(scored.class_logits.dtype)
    ce = F.binary_cross_entropy_with_logits(
        scored.class_logits, y, reduction="mean" if rm else "sum")

    fg = labels == 1
    if box_delta_targets is not None and int(fg.sum()) > 0:
        l_box = smooth_l1(scored.refine_deltas[fg], box_delta_targets[fg], reduce_mean=rm)
    else:
        l_box = scored.a.new_zeros(())

    use = rpn_labels >= 0
    if int(use.sum()) > 0:
        l_rpn_obj = F.binary_cross_entropy_with_logits(
            rpn_logits[use], rpn_labels[use].to(rpn_logits.dtype),
            reduction="mean" if rm else "sum")
    else:
        l_rpn_obj = scored.a.new_zeros(())
    pos = rpn_labels == 1
    if int(pos.sum()) > 0:
        l_rpn_box = smooth_l1(rpn_delta_preds[pos], rpn_delta_targets[pos], reduce_mean=rm)
    else:
        l_rpn_box = scored.a.new_zeros(())

    total = (w.margin * l_margin + w.margin_rank * l_rank + w.cross_entropy * ce
             + w.box_reg * l_box + w.rpn_objectness * l_rpn_obj + w.rpn_box * l_rpn_box)
    breakdown = LossBreakdown(
        margin=l_margin.detach().item(), margin_rank=l_rank.detach().item(),
        cross_entropy=ce.detach().item(), box_reg=l_box.detach().item(),
        rpn_objectness=l_rpn_obj.detach().item(), rpn_box=l_rpn_box.detach().item(),
        total=total.detach().item())
    return total, breakdown
