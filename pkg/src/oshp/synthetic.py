"""Procedurally drawn "people" with pixel-exact part masks.

A stand-in for real human parsing data at desk scale. Each figure is built
from simple shapes (a disc for the head, capsules for limbs, polygons for
torso, hat and skirt) painted back to front, so the label mask is exact by
construction. Every part has its own hue band and stripe texture; pose,
scale, position and colors are randomized per image.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .data import SPLITS, DatasetManifest, ManifestEntry, save_mask
from .errors import ConfigError

# part -> (hue, stripe angle in degrees, stripe period in pixels at 64 px)
PART_STYLE = {
    "head": (0.08, 0.0, 0.0),
    "hat": (0.25, 90.0, 5.0),
    "sunglasses": (0.50, 0.0, 0.0),
    "torso": (0.58, 0.0, 6.0),
    "arms": (0.42, 45.0, 4.0),
    "left_arm": (0.42, 45.0, 4.0),
    "right_arm": (0.42, 45.0, 4.0),
    "legs": (0.75, 90.0, 7.0),
    "left_leg": (0.75, 90.0, 7.0),
    "right_leg": (0.75, 90.0, 7.0),
    "skirt": (0.92, 135.0, 3.0),
    "shoes": (0.00, 0.0, 0.0),
}

DEFAULT_PRESENCE = {"hat": 0.5, "skirt": 0.5, "sunglasses": 0.5, "shoes": 0.7, "arms": 0.9, "legs": 0.9}


@dataclass
class SyntheticConfig:
    class_names: list[str] = field(default_factory=lambda: ["head", "torso", "arms", "legs", "hat", "skirt"])
    image_size: int = 64
    split_sizes: dict[str, int] = field(default_factory=lambda: {
        "meta_train_support": 60, "meta_train_query": 60,
        "meta_test_support": 24, "meta_test_query": 24})
    presence: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_PRESENCE))

    def validate(self) -> None:
        unknown = [c for c in self.class_names if c not in PART_STYLE]
        if unknown:
            raise ConfigError(f"unknown part classes {unknown}; choose from {sorted(PART_STYLE)}")
        if len(self.class_names) < 4:
            raise ConfigError("at least 4 part classes are required")
        if len(set(self.class_names)) != len(self.class_names):
            raise ConfigError("part classes must be unique")
        if self.image_size < 32:
            raise ConfigError("image_size must be at least 32")
        for s in self.split_sizes:
            if s not in SPLITS:
                raise ConfigError(f"unknown split {s!r}")


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float64)


def _capsule(yy, xx, p0, p1, r):
    (y0, x0), (y1, x1) = p0, p1
    dy, dx = y1 - y0, x1 - x0
    t = ((yy - y0) * dy + (xx - x0) * dx) / max(dy * dy + dx * dx, 1e-9)
    t = np.clip(t, 0.0, 1.0)
    return (yy - (y0 + t * dy)) ** 2 + (xx - (x0 + t * dx)) ** 2 <= r * r


def _convex_polygon(yy, xx, pts):
    """Pixels inside a convex polygon given as (y, x) vertices in order."""
    inside = np.ones_like(yy, dtype=bool)
    n = len(pts)
    sign = None
    for i in range(n):
        (y0, x0), (y1, x1) = pts[i], pts[(i + 1) % n]
        cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        if sign is None:
            # orientation from the polygon's signed area
            area = sum(pts[k][1] * pts[(k + 1) % n][0] - pts[(k + 1) % n][1] * pts[k][0] for k in range(n))
            sign = 1.0 if area > 0 else -1.0
        inside &= sign * cross >= 0
    return inside


def _figure_shapes(rng, size, presence):
    """Yield (part, boolean mask) in painting order for one random figure."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    fh = size * rng.uniform(0.72, 0.95)
    top = rng.uniform(0.02, 0.98 - fh / size) * size
    cx = size * rng.uniform(0.35, 0.65)
    lean = rng.uniform(-0.06, 0.06) * fh

    head_r = 0.09 * fh
    head_c = (top + 0.13 * fh, cx)
    neck_y = head_c[0] + head_r
    waist_y = top + 0.56 * fh
    tw = 0.15 * fh
    hip_c = (waist_y, cx + lean)
    shapes = []

    def present(part):
        return rng.uniform() < presence.get(part, 1.0)

    # legs: from the hip outward
    leg_len, leg_r = 0.40 * fh, 0.05 * fh
    legs_on = present("legs")
    for side, name in ((-1, "left_leg"), (1, "right_leg")):
        ang = math.radians(rng.uniform(2, 18)) * side
        p0 = (hip_c[0], hip_c[1] + side * 0.07 * fh)
        p1 = (p0[0] + leg_len * math.cos(ang), p0[1] + leg_len * math.sin(ang))
        m = _capsule(yy, xx, p0, p1, leg_r)
        if legs_on:
            shapes.append((name, "legs", m))
        if "shoes" in presence and present("shoes"):
            shapes.append(("shoes", "shoes", _capsule(yy, xx, p1, (p1[0], p1[1] + side * 0.06 * fh), 0.045 * fh)))

    torso = [(neck_y, cx - tw), (neck_y, cx + tw), (waist_y, hip_c[1] + 0.8 * tw), (waist_y, hip_c[1] - 0.8 * tw)]
    shapes.append(("torso", "torso", _convex_polygon(yy, xx, torso)))

    # arms hang from the shoulders at a random outward angle
    arm_len, arm_r = 0.36 * fh, 0.04 * fh
    arms_on = present("arms")
    for side, name in ((-1, "left_arm"), (1, "right_arm")):
        ang = math.radians(rng.uniform(10, 70)) * side
        p0 = (neck_y + 0.05 * fh, cx + side * (tw + 0.3 * arm_r))
        p1 = (p0[0] + arm_len * math.cos(ang), p0[1] + arm_len * math.sin(ang))
        if arms_on:
            shapes.append((name, "arms", _capsule(yy, xx, p0, p1, arm_r)))

    if present("skirt"):
        sw_top, sw_bot = 0.85 * tw, 1.5 * tw
        sy0, sy1 = waist_y - 0.04 * fh, waist_y + rng.uniform(0.16, 0.24) * fh
        skirt = [(sy0, hip_c[1] - sw_top), (sy0, hip_c[1] + sw_top), (sy1, hip_c[1] + sw_bot), (sy1, hip_c[1] - sw_bot)]
        shapes.append(("skirt", "skirt", _convex_polygon(yy, xx, skirt)))

    shapes.append(("head", "head", (yy - head_c[0]) ** 2 + (xx - head_c[1]) ** 2 <= head_r ** 2))

    if "sunglasses" in presence and present("sunglasses"):
        gy = head_c[0] - 0.15 * head_r
        shapes.append(("sunglasses", "sunglasses",
                       _capsule(yy, xx, (gy, head_c[1] - 0.6 * head_r), (gy, head_c[1] + 0.6 * head_r), 0.22 * head_r)))

    if present("hat"):
        crown = [(head_c[0] - 1.9 * head_r, head_c[1] - 0.75 * head_r), (head_c[0] - 1.9 * head_r, head_c[1] + 0.75 * head_r),
                 (head_c[0] - 0.45 * head_r, head_c[1] + 1.0 * head_r), (head_c[0] - 0.45 * head_r, head_c[1] - 1.0 * head_r)]
        brim = _capsule(yy, xx, (head_c[0] - 0.45 * head_r, head_c[1] - 1.5 * head_r),
                        (head_c[0] - 0.45 * head_r, head_c[1] + 1.5 * head_r), 0.25 * head_r)
        shapes.append(("hat", "hat", _convex_polygon(yy, xx, crown) | brim))
    return yy, xx, shapes


def render_figure(rng: np.random.Generator, config: SyntheticConfig):
    """Draw one image and its mask. Returns (uint8 H x W x 3, uint8 H x W)."""
    size = config.image_size
    label_of = {name: i + 1 for i, name in enumerate(config.class_names)}
    presence = {k: v for k, v in config.presence.items()}
    for opt in ("shoes", "sunglasses"):
        if opt not in config.class_names:
            presence.pop(opt, None)
    yy, xx, shapes = _figure_shapes(rng, size, presence)

    # low-saturation background with smooth blotches
    base = _hsv(rng.uniform(), rng.uniform(0.0, 0.25), rng.uniform(0.3, 0.9))
    img = np.broadcast_to(base, (size, size, 3)).copy()
    for _ in range(3):
        cy, cx, r = rng.uniform(0, size), rng.uniform(0, size), rng.uniform(0.1, 0.4) * size
        w = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))[..., None]
        img = img * (1 - 0.3 * w) + 0.3 * w * _hsv(rng.uniform(), rng.uniform(0, 0.25), rng.uniform(0.3, 0.9))
    mask = np.zeros((size, size), dtype=np.uint8)

    colors = {}
    scale = size / 64.0
    for raw_name, group, region in shapes:
        name = raw_name if raw_name in label_of else group
        if name not in label_of or not region.any():
            continue
        if name not in colors:
            hue, _, _ = PART_STYLE[name]
            colors[name] = _hsv(hue + rng.uniform(-0.03, 0.03), rng.uniform(0.55, 0.95), rng.uniform(0.55, 0.95))
        hue, angle, period = PART_STYLE[name]
        color = colors[name]
        if period > 0:
            a = math.radians(angle)
            phase = rng.uniform(0, 2 * math.pi)
            stripe = np.sin(2 * math.pi * (yy * math.sin(a) + xx * math.cos(a)) / (period * scale) + phase)
            shade = 1.0 + 0.18 * stripe[..., None]
        else:
            shade = 1.0
        img = np.where(region[..., None], color * shade, img)
        mask[region] = label_of[name]

    img = img + rng.normal(0.0, 0.02, size=img.shape)
    img = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    return img, mask


def generate_synthetic_dataset(config: SyntheticConfig, rng_seed: int, out_dir) -> DatasetManifest:
    """Render every split into ``out_dir`` and write ``out_dir/manifest.jsonl``."""
    config.validate()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    rng = np.random.default_rng(rng_seed)
    entries = []
    for split in SPLITS:
        for i in range(config.split_sizes.get(split, 0)):
            img, mask = render_figure(rng, config)
            stem = f"{split}_{i:05d}"
            img_path = out_dir / "images" / f"{stem}.png"
            mask_path = out_dir / "masks" / f"{stem}.png"
            img_path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(img, mode="RGB").save(img_path)
            save_mask(mask, mask_path)
            entries.append(ManifestEntry(img_path.resolve(), mask_path.resolve(), split))
    manifest = DatasetManifest(entries, ["background", *config.class_names])
    manifest.save(out_dir / "manifest.jsonl")
    return manifest
