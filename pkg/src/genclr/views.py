"""Differentiable augmentation family for image batches.

Each view is a deterministic map once its parameters are sampled: crop a
sub-rectangle and resize back bilinearly, optional horizontal flip, additive
brightness jitter, multiplicative contrast jitter about the per-image mean,
then clamp to [-1, 1]. Every step is differentiable w.r.t. the input pixels
(zero gradient outside the clamp), so a loss on a view of G(z) reaches the
generator's weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ViewPolicy:
    """Sampling ranges for view parameters."""
    crop_scale: tuple[float, float] = (0.5, 1.0)   # fraction of image area
    flip_prob: float = 0.5
    brightness: float = 0.4                        # additive, pre-clamp
    contrast: tuple[float, float] = (0.6, 1.4)     # multiplicative, about mean
    enable_crop: bool = True
    enable_flip: bool = True
    enable_brightness: bool = True
    enable_contrast: bool = True

    def __post_init__(self):
        if not (0.0 < self.crop_scale[0] <= self.crop_scale[1] <= 1.0):
            raise ValueError(f"bad crop scale range {self.crop_scale}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip probability {self.flip_prob} outside [0,1]")
        if self.brightness < 0:
            raise ValueError("brightness jitter must be >= 0")
        if not (0.0 < self.contrast[0] <= self.contrast[1]):
            raise ValueError(f"bad contrast range {self.contrast}")

    @staticmethod
    def identity() -> "ViewPolicy":
        """All jitter ranges collapsed so sampling yields identity params."""
        return ViewPolicy(crop_scale=(1.0, 1.0), flip_prob=0.0,
                          brightness=0.0, contrast=(1.0, 1.0))


@dataclass(frozen=True)
class ViewParams:
    """One sampled view transform: fully deterministic once constructed."""
    top: int
    left: int
    height: int
    width: int
    flip: bool
    brightness: float
    contrast: float

    def validate(self, image_hw: tuple[int, int]):
        h, w = image_hw
        if self.height < 1 or self.width < 1:
            raise ValueError(f"crop size {self.height}x{self.width} below 1 pixel")
        if self.top < 0 or self.left < 0 or self.top + self.height > h \
                or self.left + self.width > w:
            raise ValueError(
                f"crop box (top={self.top}, left={self.left}, h={self.height}, "
                f"w={self.width}) outside a {h}x{w} image")


def identity_params(image_hw: tuple[int, int]) -> ViewParams:
    h, w = image_hw
    return ViewParams(0, 0, h, w, flip=False, brightness=0.0, contrast=1.0)


def sample_view_params(policy: ViewPolicy, rng: np.random.Generator,
                       image_hw: tuple[int, int]) -> ViewParams:
    """Draw one ViewParams from the policy. The draw order is fixed so a
    cloned RNG stream reproduces the exact same parameters."""
    h, w = image_hw
    if policy.enable_crop:
        scale = rng.uniform(policy.crop_scale[0], policy.crop_scale[1])
        side = np.sqrt(scale)
        ch = max(1, int(round(side * h)))
        cw = max(1, int(round(side * w)))
        ch, cw = min(ch, h), min(cw, w)
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
    else:
        top, left, ch, cw = 0, 0, h, w
    flip = bool(policy.enable_flip and rng.uniform() < policy.flip_prob)
    delta = float(rng.uniform(-policy.brightness, policy.brightness)) \
        if policy.enable_brightness else 0.0
    factor = float(rng.uniform(policy.contrast[0], policy.contrast[1])) \
        if policy.enable_contrast else 1.0
    return ViewParams(top, left, ch, cw, flip, delta, factor)


def apply_views(x: Tensor, params: list[ViewParams],
                out_hw: tuple[int, int] | None = None) -> Tensor:
    """Apply one sampled transform per image of an NCHW batch.

    Output resolution defaults to the input resolution (crops are resized
    back up). Pure function: same (x, params) gives the identical output.
    """
    b, c, h, w = x.shape
    if len(params) != b:
        raise ValueError(f"{len(params)} view params for a batch of {b}")
    out_h, out_w = out_hw if out_hw is not None else (h, w)
    boxes = np.empty((b, 4), dtype=np.float64)
    for i, p in enumerate(params):
        p.validate((h, w))
        boxes[i] = (p.top, p.left, p.height, p.width)
    y = ad.bilinear_resample(x, boxes, out_h, out_w)

    flags = np.array([p.flip for p in params], dtype=bool)
    if flags.any():
        y = ad.flip_lr(y, flags)

    deltas = np.array([[p.brightness] for p in params],
                      dtype=x.dtype).reshape(b, 1, 1, 1)
    if np.any(deltas != 0.0):
        y = ad.add(y, ad.constant(deltas))

    factors = np.array([p.contrast for p in params],
                       dtype=x.dtype).reshape(b, 1, 1, 1)
    if np.any(factors != 1.0):
        mean = ad.tensor_mean(y, axis=(1, 2, 3), keepdims=True)
        y = ad.add(ad.multiply(ad.subtract(y, mean), ad.constant(factors)), mean)

    return ad.clip(y, -1.0, 1.0)


def apply_view(image: Tensor, params: ViewParams,
               out_hw: tuple[int, int] | None = None) -> Tensor:
    """Single-image (C, H, W) convenience wrapper around apply_views."""
    batched = ad.reshape(image, (1,) + tuple(image.shape))
    out = apply_views(batched, [params], out_hw)
    return ad.reshape(out, tuple(out.shape[1:]))


class ImageViewFamily:
    """Adapter giving the trainer a uniform sample/apply interface."""

    def __init__(self, policy: ViewPolicy, image_hw: tuple[int, int]):
        self.policy = policy
        self.image_hw = image_hw

    def sample(self, rng: np.random.Generator, n: int) -> list[ViewParams]:
        return [sample_view_params(self.policy, rng, self.image_hw)
                for _ in range(n)]

    def apply(self, x: Tensor, params: list[ViewParams]) -> Tensor:
        return apply_views(x, params)
