"""Cross-modal attention: spatial compatibility between image cells and the
global sketch vector, attended-feature construction, concat + projection,
and the two multi-query fusion strategies."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .encoders import FeatureMap

DEFAULT_K = 256.0


@dataclass
class CompatibilityMap:
    """Unnormalized scaled dot-product scores over the image grid."""

    scores: torch.Tensor  # (H, W); may be negative
    K: float

    def __post_init__(self):
        if self.scores.ndim != 2:
            raise ValueError(f"compatibility map must be (H, W), got {tuple(self.scores.shape)}")
        if self.K <= 0:
            raise ValueError(f"scaling constant must be positive, got {self.K}")


def compatibility_map(img_psi: FeatureMap, sketch_global: torch.Tensor,
                      K: float = DEFAULT_K) -> CompatibilityMap:
    """Score every image cell against the global sketch vector.

    scores[m, n] = <img_psi[:, m, n], sketch_global> / K
    """
    if sketch_global.ndim != 1:
        raise ValueError(f"sketch global vector must be 1-D, got {tuple(sketch_global.shape)}")
    if img_psi.depth != sketch_global.shape[0]:
        raise ValueError(
            f"depth mismatch: image map d={img_psi.depth}, sketch vector d={sketch_global.shape[0]}")
    if K <= 0:
        raise ValueError(f"scaling constant must be positive, got {K}")
    scores = torch.einsum("chw,c->hw", img_psi.data, sketch_global) / K
    return CompatibilityMap(scores=scores, K=float(K))


def apply_attention(img_phi: FeatureMap, cmap: CompatibilityMap) -> FeatureMap:
    """Reweight each image cell's feature vector by its compatibility score."""
    if cmap.scores.shape != img_phi.data.shape[1:]:
        raise ValueError(
            f"spatial shape mismatch: map {tuple(cmap.scores.shape)} vs "
            f"features {tuple(img_phi.data.shape[1:])}")
    return FeatureMap(data=img_phi.data * cmap.scores.unsqueeze(0), stride=img_phi.stride)


class FuseProject(nn.Module):
    """Learned 1x1 projection of the depth-concatenated [attended; original]
    map from 2d back down to d."""

    def __init__(self, depth: int):
        super().__init__()
        self.conv = nn.Conv2d(2 * depth, depth, kernel_size=1)
        self.depth = depth

    def forward(self, attended: FeatureMap, original: FeatureMap) -> FeatureMap:
        if attended.data.shape != original.data.shape:
            raise ValueError(
                f"attended {tuple(attended.data.shape)} and original "
                f"{tuple(original.data.shape)} maps must match")
        if attended.depth != self.depth:
            raise ValueError(f"projection expects depth {self.depth}, got {attended.depth}")
        stacked = torch.cat([attended.data, original.data], dim=0)
        out = self.conv(stacked.unsqueeze(0)).squeeze(0)
        return FeatureMap(data=out, stride=original.stride)

    def init_passthrough(self):
        """Identity on the original slice, zero on the attended slice: the
        fused output then equals the original map exactly."""
        with torch.no_grad():
            self.conv.weight.zero_()
            idx = torch.arange(self.depth)
            self.conv.weight[idx, self.depth + idx, 0, 0] = 1.0
            self.conv.bias.zero_()


def fuse_and_project(attended: FeatureMap, original: FeatureMap,
                     proj: FuseProject) -> FeatureMap:
    return proj(attended, original)


def feature_fusion(maps: list[FeatureMap]) -> FeatureMap:
    """Elementwise max across N same-shape sketch feature maps."""
    if len(maps) == 0:
        raise ValueError("feature fusion needs at least one map")
    first = maps[0]
    for m in maps[1:]:
        if m.data.shape != first.data.shape:
            raise ValueError(
                f"fusion shape mismatch: {tuple(m.data.shape)} vs {tuple(first.data.shape)}")
    if len(maps) == 1:
        return first
    fused = torch.stack([m.data for m in maps]).amax(dim=0)
    return FeatureMap(data=fused, stride=first.stride)


def attention_fusion(cmaps: list[CompatibilityMap]) -> CompatibilityMap:
    """Cellwise arithmetic mean across N same-shape compatibility maps."""
    if len(cmaps) == 0:
        raise ValueError("attention fusion needs at least one map")
    first = cmaps[0]
    for m in cmaps[1:]:
        if m.scores.shape != first.scores.shape:
            raise ValueError(
                f"fusion shape mismatch: {tuple(m.scores.shape)} vs {tuple(first.scores.shape)}")
    if len(cmaps) == 1:
        return first
    mean = torch.stack([m.scores for m in cmaps]).mean(dim=0)
    return CompatibilityMap(scores=mean, K=first.K)


def upsample_attention(cmap: CompatibilityMap, stride: int, image_size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbor upsample of the compatibility grid to image resolution."""
    w, h = image_size
    up = cmap.scores.detach().repeat_interleave(stride, dim=0).repeat_interleave(stride, dim=1)
    return up[:h, :w]
