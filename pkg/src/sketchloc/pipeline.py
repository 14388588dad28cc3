"""End-to-end forward pass shared by training, evaluation and serving:
encode -> (attention) -> RPN -> proposal selection -> ROI pooling -> scoring.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .attention import CompatibilityMap
from .boxes import decode_boxes, encode_deltas, iou_matrix, nms
from .encoders import FeatureMap
from .model import QueryFeatures, SketchLocalizer
from .proposals import (EVAL_PROPOSALS, ProposalConfig, TRAIN_PROPOSALS,
                        label_proposals, roi_pool, select_proposals)
from .scoring import ScoredProposals


@dataclass
class ProposeOutputs:
    img_phi: FeatureMap
    final_map: FeatureMap
    cmap: CompatibilityMap | None
    query: QueryFeatures
    rpn_logits: torch.Tensor       # (N_anchors,)
    rpn_deltas: torch.Tensor       # (N_anchors, 4)
    proposal_boxes: np.ndarray     # (P, 4)
    proposal_objectness: np.ndarray  # (P,)


@dataclass
class ForwardOutputs(ProposeOutputs):
    scored: ScoredProposals = None


def propose(model: SketchLocalizer, image: np.ndarray, rasters,
            fusion: str = "feature",
            prop_cfg: ProposalConfig = EVAL_PROPOSALS,
            extra_boxes: np.ndarray | None = None) -> ProposeOutputs:
    """Encode, attend, and run the RPN funnel for one (image, query) pair.

    Proposal boxes are treated as constants (detached RPN deltas); gradients
    reach the RPN through its own losses and the backbone through the pooled
    features. ``extra_boxes`` are appended to the proposal set
    (training-time ground-truth augmentation).
    """
    img_phi = model.encode_image(image)
    sketch_maps = model.encode_sketches(rasters)
    query = model.query_features(sketch_maps, fusion)
    final_map, cmap = model.final_map(img_phi, query, fusion)

    rpn_logits, rpn_deltas = model.rpn(final_map)
    size = (image.shape[1], image.shape[0])
    boxes, kept = decode_boxes(model.anchors.boxes,
                               rpn_deltas.detach().double().numpy(), size)
    objectness = torch.sigmoid(rpn_logits.detach()).numpy()[kept]
    proposals = select_proposals(boxes, objectness, prop_cfg)
    pboxes = np.array([p.box.as_array() for p in proposals]).reshape(-1, 4)
    pscores = np.array([p.objectness for p in proposals])
    if extra_boxes is not None and len(extra_boxes):
        pboxes = np.concatenate([pboxes, np.asarray(extra_boxes, dtype=np.float64)])
        pscores = np.concatenate([pscores, np.ones(len(extra_boxes))])
    return ProposeOutputs(
        img_phi=img_phi, final_map=final_map, cmap=cmap, query=query,
        rpn_logits=rpn_logits, rpn_deltas=rpn_deltas,
        proposal_boxes=pboxes, proposal_objectness=pscores)


def score_boxes(model: SketchLocalizer, out: ProposeOutputs,
                boxes: np.ndarray) -> ScoredProposals:
    rois = roi_pool(out.final_map, boxes, model.config.roi_size)
    context = out.final_map.data.mean(dim=(1, 2))
    return model.scorer(rois, out.query.scoring_vector, image_context=context)


def run_pipeline(model: SketchLocalizer, image: np.ndarray, rasters,
                 fusion: str = "feature",
                 prop_cfg: ProposalConfig = EVAL_PROPOSALS,
                 extra_boxes: np.ndarray | None = None) -> ForwardOutputs:
    """Full forward pass: propose, then score every surviving proposal."""
    out = propose(model, image, rasters, fusion, prop_cfg, extra_boxes)
    scored = score_boxes(model, out, out.proposal_boxes)
    return ForwardOutputs(**out.__dict__, scored=scored)


def scoring_targets(proposal_boxes: np.ndarray, scene, query_category: str):
    """Foreground labels and box-refinement delta targets for the scorer.

    Each foreground proposal regresses toward its best-IoU ground-truth box
    of the query category.
    """
    labels = label_proposals(proposal_boxes, scene, query_category)
    targets = np.zeros((len(proposal_boxes), 4), dtype=np.float64)
    gt = np.array([o.box.as_array() for o in scene.objects
                   if o.category == query_category]).reshape(-1, 4)
    if len(gt) and len(proposal_boxes):
        best = iou_matrix(proposal_boxes, gt).argmax(axis=1)
        targets = encode_deltas(proposal_boxes, gt[best])
    return labels, targets


def sample_for_scoring(labels: np.ndarray, rng: np.random.Generator,
                       n_total: int = 64, fg_cap: int = 16) -> np.ndarray:
    """Balanced proposal subset for the scoring losses: all foreground up to
    fg_cap, background filling the rest. Keeps the foreground gradient from
    drowning in the ~30:1 background excess."""
    fg = np.flatnonzero(labels == 1)
    bg = np.flatnonzero(labels == 0)
    keep_fg = rng.permutation(fg)[:fg_cap]
    keep_bg = rng.permutation(bg)[:n_total - len(keep_fg)]
    return np.sort(np.concatenate([keep_fg, keep_bg]))


@dataclass
class DetectionSet:
    boxes: np.ndarray   # (D, 4)
    scores: np.ndarray  # (D,) descending
    cmap: CompatibilityMap | None


def detect(model: SketchLocalizer, image: np.ndarray, rasters,
           fusion: str = "feature", max_detections: int = 100,
           prop_cfg: ProposalConfig = EVAL_PROPOSALS,
           final_nms_iou: float = 0.5) -> DetectionSet:
    """Inference: score proposals, refine their boxes, NMS, truncate."""
    with torch.no_grad():
        out = run_pipeline(model, image, rasters, fusion, prop_cfg)
    if len(out.proposal_boxes) == 0:
        return DetectionSet(boxes=np.zeros((0, 4)), scores=np.zeros(0), cmap=out.cmap)
    size = (image.shape[1], image.shape[0])
    refined, kept = decode_boxes(out.proposal_boxes,
                                 out.scored.refine_deltas.double().numpy(), size)
    scores = out.scored.a.double().numpy()[kept]
    order = nms(refined, scores, final_nms_iou)[:max_detections]
    return DetectionSet(boxes=refined[order], scores=scores[order], cmap=out.cmap)


def pipeline_train_config() -> ProposalConfig:
    return TRAIN_PROPOSALS
