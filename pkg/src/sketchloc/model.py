"""The assembled localization model: encoders, cross-modal attention, RPN,
and the proposal scoring head behind one parameter registry."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
from torch import nn

from .attention import (CompatibilityMap, apply_attention, attention_fusion,
                        compatibility_map, feature_fusion, FuseProject)
from .encoders import (ConvEncoder, FeatureMap, PointwiseTransform,
                       edge_magnitude, global_max_pool, global_mean_pool,
                       image_to_tensor, init_encoder_structured, init_params,
                       parameter_registry, raster_to_tensor)
from .proposals import AnchorGrid, generate_anchors, RpnHead
from .scoring import ScoringHead

FUSION_MODES = ("feature", "attention")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 128
    sketch_size: int = 64
    image_channels: tuple[int, ...] = (16, 32, 64)
    sketch_channels: tuple[int, ...] = (16, 32, 64)
    anchor_scales: tuple[float, ...] = (16.0, 32.0, 64.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_hidden: int = 64
    roi_size: int = 4
    compat_k: float = 256.0
    with_attention: bool = True

    @property
    def depth(self) -> int:
        return self.image_channels[-1]

    @property
    def stride(self) -> int:
        return 2 ** len(self.image_channels)

    def digest(self) -> str:
        """Architecture fingerprint; the attention toggle is excluded so a
        no-attention checkpoint can seed incremental attention training."""
        payload = asdict(self)
        payload.pop("with_attention")
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self):
        if self.image_channels[-1] != self.sketch_channels[-1]:
            raise ValueError("image and sketch branches must share the output depth d")
        if len(self.image_channels) != len(self.sketch_channels):
            raise ValueError("branches must share the total stride")
        if self.image_size % self.stride or self.sketch_size % self.stride:
            raise ValueError(f"canvas sizes must be multiples of stride {self.stride}")


@dataclass
class QueryFeatures:
    """Encoded sketch queries plus everything scoring needs."""

    maps: list[FeatureMap]
    fused_map: FeatureMap          # feature-fusion result (max over queries)
    scoring_vector: torch.Tensor   # (d,) mean-pooled vector fed to the scorer


class SketchLocalizer(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        d = config.depth
        # the scene branch sees contour (edge magnitude) input, not raw RGB,
        # so both branches consume stroke-like single-channel images
        self.image_encoder = ConvEncoder(1, config.image_channels)
        self.sketch_encoder = ConvEncoder(1, config.sketch_channels)
        if config.with_attention:
            self.psi_image = PointwiseTransform(d)
            self.psi_sketch = PointwiseTransform(d)
            self.fuse = FuseProject(d)
        else:
            self.psi_image = None
            self.psi_sketch = None
            self.fuse = None
        n_anchor = len(config.anchor_scales) * len(config.anchor_ratios)
        self.rpn = RpnHead(d, n_anchor, hidden=config.rpn_hidden)
        self.scorer = ScoringHead(d)
        gen = torch.Generator().manual_seed(seed)
        init_params(self, gen)
        # both branches start from the same oriented-filter stack so that
        # early features mean the same thing across modalities; the heads
        # keep their fan-in-scaled random init
        enc_gen = torch.Generator().manual_seed(seed)
        init_encoder_structured(self.image_encoder, enc_gen)
        enc_gen = torch.Generator().manual_seed(seed)
        init_encoder_structured(self.sketch_encoder, enc_gen)
        with torch.no_grad():
            if config.with_attention:
                self.psi_image.init_identity()
                self.psi_sketch.init_identity()
                self._perturb(self.psi_image.conv.weight, gen, 0.02)
                self._perturb(self.psi_sketch.conv.weight, gen, 0.02)
            # the bilinear shortcut starts as a plain aligned dot product;
            # random projections here would scramble the branches' shared
            # initialization
            for proj in (self.scorer.proj_roi, self.scorer.proj_sketch):
                proj.weight.copy_(torch.eye(d))
                self._perturb(proj.weight, gen, 0.02)
                proj.bias.zero_()
            # zero-init readouts: the initial logit is the bilinear term
            # alone (random trunk noise would drown it), and refined boxes
            # start as the proposals themselves
            self.scorer.score.weight.zero_()
            self.scorer.refine.weight.zero_()
            # start foreground probabilities low (~0.12) so the positive
            # margin hinge is active from the first step
            self.scorer.score.bias.fill_(-2.0)
        grid = config.image_size // config.stride
        self.anchors: AnchorGrid = generate_anchors(
            grid, grid, config.stride, config.anchor_scales, config.anchor_ratios)

    @staticmethod
    def _perturb(weight: torch.Tensor, gen: torch.Generator, scale: float):
        noise = torch.empty_like(weight)
        noise.uniform_(-scale, scale, generator=gen)
        weight.add_(noise)

    @property
    def with_attention(self) -> bool:
        return self.config.with_attention

    def registry(self):
        return parameter_registry(self)

    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def encode_image(self, image: np.ndarray) -> FeatureMap:
        return self.image_encoder(edge_magnitude(image_to_tensor(image, self.dtype())))

    def encode_sketches(self, rasters) -> list[FeatureMap]:
        return [self.sketch_encoder(raster_to_tensor(r.pixels, self.dtype())) for r in rasters]

    def query_features(self, sketch_maps: list[FeatureMap], fusion: str = "feature") -> QueryFeatures:
        if fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {fusion!r}")
        fused = feature_fusion(sketch_maps)
        if fusion == "feature" or len(sketch_maps) == 1:
            scoring_vec = global_mean_pool(fused)
        else:
            scoring_vec = torch.stack([global_mean_pool(m) for m in sketch_maps]).mean(dim=0)
        return QueryFeatures(maps=sketch_maps, fused_map=fused, scoring_vector=scoring_vec)

    def attention_map(self, img_phi: FeatureMap, query: QueryFeatures,
                      fusion: str = "feature") -> CompatibilityMap:
        if not self.with_attention:
            raise RuntimeError("model was built without the attention branch")
        img_psi = self.psi_image(img_phi)
        k = self.config.compat_k
        if fusion == "feature" or len(query.maps) == 1:
            target = global_max_pool(self.psi_sketch(query.fused_map))
            return compatibility_map(img_psi, target, k)
        cmaps = [compatibility_map(img_psi, global_max_pool(self.psi_sketch(m)), k)
                 for m in query.maps]
        return attention_fusion(cmaps)

    def final_map(self, img_phi: FeatureMap, query: QueryFeatures,
                  fusion: str = "feature") -> tuple[FeatureMap, CompatibilityMap | None]:
        """RPN input: attention-fused map, or the raw image map when the
        attention branch is bypassed (incremental stage 1)."""
        if not self.with_attention:
            return img_phi, None
        cmap = self.attention_map(img_phi, query, fusion)
        attended = apply_attention(img_phi, cmap)
        return self.fuse(attended, img_phi), cmap

    def init_attention_passthrough(self):
        """Make the fused map equal the raw image map at initialization, so
        incremental stage-2 training starts exactly at stage-1 behavior."""
        if self.fuse is not None:
            self.fuse.init_passthrough()


def stage2_from_stage1(config: ModelConfig, seed: int) -> SketchLocalizer:
    """Fresh attention-enabled model prepared for resuming a stage-1 run:
    the projection starts as a passthrough of the original features."""
    model = SketchLocalizer(replace(config, with_attention=True), seed=seed)
    model.init_attention_passthrough()
    return model
