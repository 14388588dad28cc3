"""Convolutional feature encoders for scenes and sketch rasters.

Both branches are small stride-2 conv stacks trained from scratch, producing
a w x h x d feature map with a fixed total stride. The pointwise transforms
map features into the compatibility space without changing geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


@dataclass
class FeatureMap:
    """A spatial grid of feature vectors with its input-pixel stride."""

    data: torch.Tensor  # (C, H, W)
    stride: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"feature map must be (C, H, W), got shape {tuple(self.data.shape)}")
        if min(self.data.shape) < 1:
            raise ValueError(f"feature map dims must be >= 1, got {tuple(self.data.shape)}")

    @property
    def depth(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


class ConvEncoder(nn.Module):
    """Stack of stride-2 conv blocks with ReLU; total stride 2**len(channels).

    The first block uses a 5x5 kernel (room for oriented filters), the rest
    3x3.
    """

    def __init__(self, in_channels: int, channels: tuple[int, ...] = (16, 32, 64)):
        super().__init__()
        layers = []
        prev = in_channels
        for i, ch in enumerate(channels):
            k = 5 if i == 0 else 3
            layers.append(nn.Conv2d(prev, ch, kernel_size=k, stride=2, padding=k // 2))
            layers.append(nn.ReLU())
            prev = ch
        self.blocks = nn.Sequential(*layers)
        self.in_channels = in_channels
        self.stride = 2 ** len(channels)
        self.out_depth = channels[-1]

    def conv_layers(self) -> list[nn.Conv2d]:
        return [m for m in self.blocks if isinstance(m, nn.Conv2d)]

    def forward(self, x: torch.Tensor) -> FeatureMap:
        if x.ndim != 3 or x.shape[0] != self.in_channels:
            raise ValueError(
                f"expected ({self.in_channels}, H, W) input, got shape {tuple(x.shape)}")
        h, w = x.shape[1], x.shape[2]
        if h % self.stride or w % self.stride:
            raise ValueError(
                f"input dims {h}x{w} must be multiples of the total stride {self.stride}")
        out = self.blocks(x.unsqueeze(0)).squeeze(0)
        return FeatureMap(data=out, stride=self.stride)


class PointwiseTransform(nn.Module):
    """1x1 conv + ReLU mapping depth d -> d; preserves spatial geometry."""

    def __init__(self, depth: int):
        super().__init__()
        self.conv = nn.Conv2d(depth, depth, kernel_size=1)
        self.depth = depth

    def forward(self, fm: FeatureMap) -> FeatureMap:
        if fm.depth != self.depth:
            raise ValueError(f"transform expects depth {self.depth}, got {fm.depth}")
        out = torch.relu(self.conv(fm.data.unsqueeze(0)).squeeze(0))
        return FeatureMap(data=out, stride=fm.stride)

    def init_identity(self):
        with torch.no_grad():
            self.conv.weight.zero_()
            self.conv.weight[torch.arange(self.depth), torch.arange(self.depth), 0, 0] = 1.0
            self.conv.bias.zero_()


def _as_tensor(fm) -> torch.Tensor:
    return fm.data if isinstance(fm, FeatureMap) else fm


def global_max_pool(fm) -> torch.Tensor:
    """Per-channel max over all spatial cells; (C, H, W) -> (C,)."""
    return _as_tensor(fm).amax(dim=(1, 2))


def global_mean_pool(fm) -> torch.Tensor:
    """Per-channel mean over all spatial cells; (C, H, W) -> (C,)."""
    return _as_tensor(fm).mean(dim=(1, 2))


def init_params(module: nn.Module, generator: torch.Generator):
    """Fan-in-scaled uniform weights (ReLU gain), zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight.shape[1] * (m.weight[0, 0].numel() if m.weight.ndim == 4 else 1)
            bound = (6.0 / fan_in) ** 0.5
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


def oriented_filter_bank(n_filters: int, kernel: int = 5) -> torch.Tensor:
    """Gabor-style bank: alternating ridge (even) and edge (odd) filters over
    n_filters/2 orientations, shape (n_filters, 1, k, k).

    Ridge filters peak on thin lines, edge filters on intensity steps; both
    towers start from this bank so early feature channels mean the same
    thing for sketch strokes and scene contours.
    """
    n_orient = n_filters // 2
    ax = np.arange(kernel) - kernel // 2
    xx, yy = np.meshgrid(ax, ax)
    filters = []
    for i in range(n_orient):
        theta = i * math.pi / n_orient
        u = xx * math.cos(theta) + yy * math.sin(theta)
        v = -xx * math.sin(theta) + yy * math.cos(theta)
        env = np.exp(-(u ** 2) / 2.0 - (v ** 2) / 8.0)
        ridge = env * np.cos(math.pi * u / 2.0)
        ridge -= ridge.mean()
        edge = env * np.sin(math.pi * u / 2.0)
        filters.append(ridge / np.abs(ridge).sum())
        filters.append(edge / np.abs(edge).sum())
    bank = torch.tensor(np.stack(filters[:n_filters]), dtype=torch.float32)
    return bank.unsqueeze(1) * 4.0


def init_encoder_structured(encoder: ConvEncoder, generator: torch.Generator,
                            noise: float = 0.05):
    """Shape-descriptor initialization for a 1-channel encoder.

    conv1 starts as the oriented filter bank; each deeper conv starts as a
    channel-preserving box average (every output channel pools one input
    channel over its full kernel support) plus small uniform noise. The
    stack therefore begins as a smoothed multi-scale orientation-histogram
    extractor, which both branches share at initialization, instead of an
    arbitrary random mixer: matching between the branches is informative
    from the first step. Averaging (not a center tap) matters because ridge
    responses live on thin curves that plain subsampling would miss.
    """
    convs = encoder.conv_layers()
    with torch.no_grad():
        first = convs[0]
        bank = oriented_filter_bank(first.out_channels, first.kernel_size[0])
        first.weight.copy_(bank.expand(-1, first.in_channels, -1, -1) / first.in_channels)
        first.bias.zero_()
        for conv in convs[1:]:
            k2 = conv.kernel_size[0] * conv.kernel_size[1]
            fan_in = conv.in_channels * k2
            bound = noise * (6.0 / fan_in) ** 0.5
            conv.weight.uniform_(-bound, bound, generator=generator)
            for o in range(conv.out_channels):
                conv.weight[o, o % conv.in_channels] += 4.0 / k2
            conv.bias.zero_()


def parameter_registry(module: nn.Module) -> list[tuple[str, nn.Parameter]]:
    """Named parameters in stable registration order."""
    return list(module.named_parameters())


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for _, p in parameter_registry(module))


def image_to_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) array in [0,1] -> (3, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).to(dtype)


_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 4.0
_SOBEL_Y = _SOBEL_X.T


def edge_magnitude(image: torch.Tensor) -> torch.Tensor:
    """(3, H, W) RGB -> (1, H, W) L1 Sobel gradient magnitude of luminance.

    A fixed, parameter-free front end for the scene branch: object identity
    here is carried by shape (contours), and color is pure nuisance relative
    to colorless sketch queries. Scene contours then look like thick strokes,
    which is the representation the sketch branch sees natively. An all-zero
    image maps to an all-zero output.
    """
    lum = image.mean(dim=0, keepdim=True)
    kx = _SOBEL_X.to(image.dtype).view(1, 1, 3, 3)
    ky = _SOBEL_Y.to(image.dtype).view(1, 1, 3, 3)
    gx = torch.conv2d(lum.unsqueeze(0), kx, padding=1).squeeze(0)
    gy = torch.conv2d(lum.unsqueeze(0), ky, padding=1).squeeze(0)
    return gx.abs() + gy.abs()


def raster_to_tensor(pixels: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(H, W) array -> (1, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(pixels)).to(dtype).unsqueeze(0)
