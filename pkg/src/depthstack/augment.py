"""Online training transforms that keep depth consistent with image geometry.

Draw order is fixed: scale, rotation, crop, color, flip.  Scale, rotation
and crop are folded into one inverse affine warp so each pixel is resampled
once: RGB bilinearly, depth by nearest neighbour with the mask carried along.
Pixels that land outside the source frame or on an invalid depth are
invalid in the output; their RGB is zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Sample
from .depthmap import DepthMap


class AugmentError(ValueError):
    pass


@dataclass
class AugmentParams:
    scale: tuple[float, float] = (1.0, 1.5)
    rotation_deg: float = 5.0
    color: tuple[float, float] = (0.8, 1.2)
    flip_prob: float = 0.5
    crop_height: int = 48
    crop_width: int = 64
    rotate: bool = True

    def __post_init__(self):
        lo, hi = self.scale
        if not 0 < lo <= hi:
            raise AugmentError(f"scale range must satisfy 0 < lo <= hi, got {self.scale}")
        if not 0 <= self.color[0] <= self.color[1]:
            raise AugmentError(f"color range must satisfy 0 <= lo <= hi, got {self.color}")
        if self.rotation_deg < 0:
            raise AugmentError("rotation range must be non-negative")
        if not 0 <= self.flip_prob <= 1:
            raise AugmentError("flip probability must be in [0, 1]")
        if self.crop_height < 1 or self.crop_width < 1:
            raise AugmentError("crop size must be positive")

    @classmethod
    def nyu(cls, crop_height: int = 48, crop_width: int = 64) -> "AugmentParams":
        return cls(crop_height=crop_height, crop_width=crop_width)

    @classmethod
    def kitti(cls, crop_height: int = 48, crop_width: int = 64) -> "AugmentParams":
        # horizontal camera mount: no rotation, milder zoom
        return cls(scale=(1.0, 1.2), rotate=False, crop_height=crop_height, crop_width=crop_width)


@dataclass(frozen=True)
class Draw:
    """One concrete set of transform parameters."""

    scale: float = 1.0
    angle_deg: float = 0.0
    top: int | None = None  # None -> centred crop
    left: int | None = None
    color: tuple[float, float, float] = (1.0, 1.0, 1.0)
    flip: bool = False


def scaled_size(height: int, width: int, s: float) -> tuple[int, int]:
    return int(np.floor(height * s + 1e-9)), int(np.floor(width * s + 1e-9))


def draw_params(params: AugmentParams, height: int, width: int, rng: np.random.Generator) -> Draw:
    s = float(rng.uniform(*params.scale))
    angle = float(rng.uniform(-params.rotation_deg, params.rotation_deg)) if params.rotate else 0.0
    sh, sw = scaled_size(height, width, s)
    if sh < params.crop_height or sw < params.crop_width:
        raise AugmentError(f"crop {params.crop_height}x{params.crop_width} exceeds scaled image {sh}x{sw}")
    top = int(rng.integers(0, sh - params.crop_height + 1))
    left = int(rng.integers(0, sw - params.crop_width + 1))
    color = tuple(float(c) for c in rng.uniform(params.color[0], params.color[1], size=3))
    flip = bool(rng.random() < params.flip_prob)
    return Draw(s, angle, top, left, color, flip)


def _bilinear(img: np.ndarray, y: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, w = img.shape[:2]
    inside = (y >= -0.5) & (y <= h - 0.5) & (x >= -0.5) & (x <= w - 0.5)
    yc = np.clip(y, 0, h - 1)
    xc = np.clip(x, 0, w - 1)
    y0 = np.floor(yc).astype(int)
    x0 = np.floor(xc).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (yc - y0)[..., None]
    fx = (xc - x0)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    return np.where(inside[..., None], out, 0.0), inside


def warp(sample: Sample, draw: Draw, crop_height: int, crop_width: int) -> tuple[np.ndarray, DepthMap]:
    """Apply scale, rotation about the scaled-image centre, and crop in one resampling pass."""
    h, w = sample.depth.shape
    sh, sw = scaled_size(h, w, draw.scale)
    if sh < crop_height or sw < crop_width:
        raise AugmentError(f"crop {crop_height}x{crop_width} exceeds scaled image {sh}x{sw}")
    top = (sh - crop_height) // 2 if draw.top is None else draw.top
    left = (sw - crop_width) // 2 if draw.left is None else draw.left

    # pixel centres of the crop in scaled-image coordinates
    yy = np.arange(crop_height, dtype=np.float64)[:, None] + top
    xx = np.arange(crop_width, dtype=np.float64)[None, :] + left
    yy, xx = np.broadcast_arrays(yy, xx)
    if draw.angle_deg != 0.0:
        cy, cx = (sh - 1) / 2.0, (sw - 1) / 2.0
        a = np.radians(draw.angle_deg)
        ca, sa = np.cos(a), np.sin(a)
        dy, dx = yy - cy, xx - cx
        # inverse rotation: content turns by +angle (counter-clockwise on screen)
        yy, xx = cy + ca * dy - sa * dx, cx + sa * dy + ca * dx
    if draw.scale != 1.0:
        ys = (yy + 0.5) / draw.scale - 0.5
        xs = (xx + 0.5) / draw.scale - 0.5
    else:
        ys, xs = yy, xx

    rgb, inside = _bilinear(sample.rgb, ys, xs)
    yi = np.floor(ys + 0.5).astype(int)
    xi = np.floor(xs + 0.5).astype(int)
    near_in = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
    yi_c, xi_c = np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)
    mask = near_in & sample.depth.mask[yi_c, xi_c]
    depth = np.where(mask, sample.depth.depth[yi_c, xi_c] / draw.scale, 0.0)
    rgb = np.where((inside & near_in)[..., None], rgb, 0.0)
    return rgb, DepthMap(depth, mask)


def apply_draw(sample: Sample, draw: Draw, crop_height: int, crop_width: int) -> Sample:
    rgb, depth = warp(sample, draw, crop_height, crop_width)
    rgb = rgb * np.asarray(draw.color)
    if draw.flip:
        rgb = rgb[:, ::-1].copy()
        depth = DepthMap(depth.depth[:, ::-1].copy(), depth.mask[:, ::-1].copy())
    return Sample(sample.id, rgb, depth, sample.timestamp, sample.scene)


def augment(sample: Sample, params: AugmentParams, rng: np.random.Generator) -> Sample:
    """Random scale (depth / s), rotation, crop, per-channel colour gain and horizontal flip."""
    h, w = sample.depth.shape
    draw = draw_params(params, h, w, rng)
    return apply_draw(sample, draw, params.crop_height, params.crop_width)


def test_transform(sample: Sample, crop_height: int, crop_width: int) -> Sample:
    """Centre crop at scale 1; the offset is ``floor(remainder / 2)``."""
    h, w = sample.depth.shape
    if h < crop_height or w < crop_width:
        raise AugmentError(f"image {h}x{w} is smaller than the {crop_height}x{crop_width} crop")
    top, left = crop_offset(h, w, crop_height, crop_width)
    return Sample(sample.id, sample.rgb[top:top + crop_height, left:left + crop_width].copy(),
                  sample.depth.crop(top, left, crop_height, crop_width), sample.timestamp, sample.scene)


def crop_offset(height: int, width: int, crop_height: int, crop_width: int) -> tuple[int, int]:
    return (height - crop_height) // 2, (width - crop_width) // 2


test_transform.__test__ = False  # not a pytest test despite the name
