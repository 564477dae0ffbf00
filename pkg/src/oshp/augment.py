"""Paired image/mask augmentation: resize, random scale, random crop, random flip."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .config import AugmentConfig
from .errors import ContractError


@dataclass(frozen=True)
class AugmentDraw:
    scale: float
    top: int
    left: int
    flip: bool
    pad_top: int = 0
    pad_left: int = 0


def _resize(image: np.ndarray, mask: np.ndarray, size: tuple[int, int]):
    if tuple(image.shape[:2]) == tuple(size):
        return image, mask
    img = torch.tensor(image, dtype=torch.float32).permute(2, 0, 1)[None]
    img = F.interpolate(img, size=size, mode="bilinear", align_corners=False)[0].permute(1, 2, 0).numpy()
    m = torch.tensor(mask, dtype=torch.float32)
    m = m[None, None] if m.dim() == 2 else m.permute(2, 0, 1)[None]
    m = F.interpolate(m, size=size, mode="nearest-exact")[0].permute(1, 2, 0).numpy().astype(mask.dtype)
    if mask.ndim == 2:
        m = m[..., 0]
    return img.astype(image.dtype), m


def draw(rng: np.random.Generator, shape: tuple[int, int], out_size: tuple[int, int],
         config: AugmentConfig) -> AugmentDraw:
    """Random parameters for one augmentation; ``shape`` is the size after the initial resize."""
    lo, hi = config.scale_range
    scale = float(rng.uniform(lo, hi))
    h, w = (max(1, round(s * scale)) for s in shape)
    pad_h, pad_w = max(0, out_size[0] - h), max(0, out_size[1] - w)
    pad_top = int(rng.integers(pad_h + 1))
    pad_left = int(rng.integers(pad_w + 1))
    if config.crop:
        top = int(rng.integers(h + pad_h - out_size[0] + 1))
        left = int(rng.integers(w + pad_w - out_size[1] + 1))
    else:
        top = left = 0
    flip = bool(config.flip and rng.uniform() < 0.5)
    return AugmentDraw(scale, top, left, flip, pad_top, pad_left)


def apply(image: np.ndarray, mask: np.ndarray, d: AugmentDraw, out_size: tuple[int, int]):
    """Apply one draw to both arrays.

    Images are resampled bilinearly, masks by nearest neighbour. When the
    scaled image is smaller than ``out_size`` both are padded by edge
    replication, so padding never introduces a label the mask lacked.
    ``mask`` may carry extra label channels as ``H x W x K``.
    """
    if image.shape[:2] != mask.shape[:2]:
        raise ContractError(f"image {image.shape[:2]} and mask {mask.shape} differ in size")
    if d.scale != 1.0:
        size = tuple(max(1, round(s * d.scale)) for s in mask.shape[:2])
        image, mask = _resize(image, mask, size)
    h, w = mask.shape[:2]
    pad_h, pad_w = max(0, out_size[0] - h), max(0, out_size[1] - w)
    if pad_h or pad_w:
        pads = ((d.pad_top, pad_h - d.pad_top), (d.pad_left, pad_w - d.pad_left))
        image = np.pad(image, pads + ((0, 0),), mode="edge")
        mask = np.pad(mask, pads + ((0, 0),) * (mask.ndim - 2), mode="edge")
    image = image[d.top:d.top + out_size[0], d.left:d.left + out_size[1]]
    mask = mask[d.top:d.top + out_size[0], d.left:d.left + out_size[1]]
    if d.flip:
        image, mask = image[:, ::-1], mask[:, ::-1]
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def augment(image: np.ndarray, mask: np.ndarray, config: AugmentConfig, rng: np.random.Generator,
            out_size: Optional[tuple[int, int]] = None):
    out_size = tuple(out_size or config.resize_to or image.shape[:2])
    image, mask = _resize(image, mask, tuple(config.resize_to or out_size))
    if not config.enabled:
        return image, mask
    d = draw(rng, mask.shape[:2], out_size, config)
    return apply(image, mask, d, out_size)
