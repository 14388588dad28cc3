"""Sketch-guided object localization at desk scale.

A sketch query drives region-proposal generation through a cross-modal
attention map (local image features scored against the global sketch
vector), and the pooled proposals are ranked against the query with a
margin-rank loss. Includes synthetic scene/sketch generation, two-stage
incremental training, seen/unseen evaluation, multi-query fusion, a CLI and
an HTTP inference service.
"""

from .boxes import Box, iou, nms
from .encoders import FeatureMap, global_max_pool, global_mean_pool
from .attention import (CompatibilityMap, apply_attention, attention_fusion,
                        compatibility_map, feature_fusion)
from .model import ModelConfig, SketchLocalizer
from .scenes import CategorySplit, Scene, SceneConfig, generate_scene, split_categories
from .sketches import (RasterSketch, StrokeSketch, generate_sketch,
                       parse_stroke_file, rasterize_sketch, sketch_categories,
                       write_stroke_file)
from .scoring import margin_loss, margin_rank_loss
from .training import TrainConfig, lr_at

__version__ = "0.1.0"

__all__ = [
    "Box", "iou", "nms", "FeatureMap", "global_max_pool", "global_mean_pool",
    "CompatibilityMap", "apply_attention", "attention_fusion",
    "compatibility_map", "feature_fusion", "ModelConfig", "SketchLocalizer",
    "CategorySplit", "Scene", "SceneConfig", "generate_scene",
    "split_categories", "RasterSketch", "StrokeSketch", "generate_sketch",
    "parse_stroke_file", "rasterize_sketch", "sketch_categories",
    "write_stroke_file", "margin_loss", "margin_rank_loss", "TrainConfig",
    "lr_at", "__version__",
]
