"""Shared (Siamese) feature encoder and the two per-pixel projection heads.

Tensors are channels-first: images are ``(B, 3, H, W)``, feature maps
``(B, D, h, w)`` with ``h = H // downsample_factor``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ContractError

SPACES = ("cgs", "fgs")


@dataclass
class EncoderConfig:
    input_size: tuple[int, int] = (64, 64)
    feature_dim: int = 64
    width: int = 16
    downsample_factor: int = 4
    context_dilations: tuple[int, ...] = (2, 4)
    skip_dim: int = 16
    cgs_dim: int = 64
    fgs_dim: int = 64
    norm_groups: int = 4  # GroupNorm groups per conv; 0 disables normalization

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)
        self.context_dilations = tuple(int(d) for d in self.context_dilations)
        f = self.downsample_factor
        if f < 2 or f & (f - 1):
            raise ConfigError("downsample_factor must be a power of two >= 2")
        if any(s % f for s in self.input_size):
            raise ConfigError(f"input_size {self.input_size} is not divisible by {f}")
        if min(self.feature_dim, self.cgs_dim, self.fgs_dim) < 2:
            raise ConfigError("feature dimensions must be at least 2")

    @property
    def num_stages(self) -> int:
        return int(math.log2(self.downsample_factor))

    @property
    def feature_size(self) -> tuple[int, int]:
        return (self.input_size[0] // self.downsample_factor, self.input_size[1] // self.downsample_factor)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["context_dilations"] = list(self.context_dilations)
        return d


def _conv(cin, cout, stride=1, dilation=1, groups=0):
    conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation)
    if groups <= 0:
        return conv
    return nn.Sequential(conv, nn.GroupNorm(math.gcd(groups, cout), cout))


class Encoder(nn.Module):
    """Small strided conv stack with a low-level skip, in the DeepLab V3+ spirit.

    The stride-2 features are pooled to the output stride and concatenated
    with the high-level features before the final fusion conv.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        w, g = config.width, config.norm_groups
        self.stem = _conv(3, w, groups=g)
        stages, cin = [], w
        for i in range(config.num_stages):
            cout = w * 2 ** (i + 1)
            stages.append(nn.Sequential(_conv(cin, cout, stride=2, groups=g), nn.ReLU(),
                                        _conv(cout, cout, groups=g), nn.ReLU()))
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.context = nn.ModuleList(_conv(cin, cin, dilation=d, groups=g) for d in config.context_dilations)
        self.skip = nn.Conv2d(2 * w, config.skip_dim, 1)
        self.fuse = _conv(cin + config.skip_dim, config.feature_dim, groups=g)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.stem(x))
        low = None
        for stage in self.stages:
            x = stage(x)
            if low is None:
                low = x
        for conv in self.context:
            x = x + F.relu(conv(x))
        low = F.relu(self.skip(low))
        k = low.shape[-1] // x.shape[-1]
        if k > 1:
            low = F.avg_pool2d(low, k)
        return F.relu(self.fuse(torch.cat([x, low], dim=1)))


class Embedder(nn.Module):
    """Encoder g plus the 1x1 projection heads into the coarse and fine spaces."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.proj = nn.ModuleDict({
            "cgs": nn.Conv2d(config.feature_dim, config.cgs_dim, 1),
            "fgs": nn.Conv2d(config.feature_dim, config.fgs_dim, 1),
        })

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.dim() != 4 or images.shape[1] != 3 or tuple(images.shape[-2:]) != self.config.input_size:
            raise ContractError(f"expected (B, 3, {self.config.input_size[0]}, {self.config.input_size[1]}) "
                                f"images, got {tuple(images.shape)}")
        return self.encoder(images)

    def project(self, features: torch.Tensor, space: str) -> torch.Tensor:
        if space not in self.proj:
            raise ContractError(f"unknown metric space {space!r}")
        return self.proj[space](features)

    def forward(self, images: torch.Tensor) -> dict[str, torch.Tensor]:
        g = self.encode(images)
        return {space: self.project(g, space) for space in SPACES}


def image_to_tensor(image, dtype=torch.float32) -> torch.Tensor:
    """H x W x 3 array in [0, 1] to a (3, H, W) tensor."""
    return torch.tensor(np.asarray(image), dtype=dtype).permute(2, 0, 1).contiguous()
