"""Procedural 28x28 grayscale glyph corpus, 10 classes.

A deterministic stand-in for Fashion-MNIST-scale data in offline
environments: parametric shapes with per-sample position/size/rotation/
intensity jitter plus pixel noise, quantized to 8-bit. Learnable by a small
encoder, coarse enough for a small GAN.
"""

from __future__ import annotations

import os

import numpy as np

from . import data as dataio

CLASS_NAMES = ("disk", "ring", "square", "frame", "plus", "cross",
               "hbars", "vbars", "triangle", "checker")


def _grid(size: int, cx: float, cy: float, angle: float):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    x, y = x - cx, y - cy
    c, s = np.cos(angle), np.sin(angle)
    return c * x + s * y, -s * x + c * y


def _render(cls: int, size: int, rng: np.random.Generator) -> np.ndarray:
    cx = size / 2 + rng.uniform(-2.5, 2.5)
    cy = size / 2 + rng.uniform(-2.5, 2.5)
    r = rng.uniform(6.0, 9.5)
    angle = rng.uniform(-0.35, 0.35)
    xr, yr = _grid(size, cx, cy, angle)
    rad = np.sqrt(xr * xr + yr * yr)

    if cls == 0:      # disk
        mask = rad <= r
    elif cls == 1:    # ring
        mask = (rad <= r) & (rad >= r - rng.uniform(2.0, 3.5))
    elif cls == 2:    # square
        mask = (np.abs(xr) <= r * 0.8) & (np.abs(yr) <= r * 0.8)
    elif cls == 3:    # frame
        t = rng.uniform(1.5, 3.0)
        outer = (np.abs(xr) <= r * 0.85) & (np.abs(yr) <= r * 0.85)
        inner = (np.abs(xr) <= r * 0.85 - t) & (np.abs(yr) <= r * 0.85 - t)
        mask = outer & ~inner
    elif cls == 4:    # plus
        t = rng.uniform(1.5, 2.8)
        mask = ((np.abs(xr) <= t) | (np.abs(yr) <= t)) & (rad <= r)
    elif cls == 5:    # diagonal cross
        t = rng.uniform(1.5, 2.8)
        mask = ((np.abs(xr - yr) <= t * 1.4) | (np.abs(xr + yr) <= t * 1.4)) \
            & (rad <= r)
    elif cls == 6:    # horizontal bars
        period = rng.uniform(4.0, 6.0)
        mask = (np.mod(yr, period) < period / 2) & (np.abs(yr) <= r) \
            & (np.abs(xr) <= r)
    elif cls == 7:    # vertical bars
        period = rng.uniform(4.0, 6.0)
        mask = (np.mod(xr, period) < period / 2) & (np.abs(yr) <= r) \
            & (np.abs(xr) <= r)
    elif cls == 8:    # triangle
        h = r * 1.2
        mask = (yr >= -h / 2) & (yr <= h / 2) \
            & (np.abs(xr) <= (h / 2 - yr) * 0.6)
    elif cls == 9:    # checker
        period = rng.uniform(5.0, 7.0)
        mask = ((np.mod(xr, period) < period / 2)
                ^ (np.mod(yr, period) < period / 2)) \
            & (np.abs(xr) <= r) & (np.abs(yr) <= r)
    else:
        raise ValueError(f"unknown glyph class {cls}")

    intensity = rng.uniform(0.65, 1.0)
    img = mask.astype(np.float64) * intensity
    img += rng.normal(0.0, 0.04, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def make_glyphs(n: int, seed: int = 0, size: int = 28):
    """-> (uint8 images (n, size, size), int labels (n,)), classes cycled."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2897]))
    images = np.empty((n, size, size), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        cls = i % len(CLASS_NAMES)
        images[i] = np.rint(_render(cls, size, rng) * 255).astype(np.uint8)
        labels[i] = cls
    # decorrelate index order from class order
    perm = rng.permutation(n)
    return images[perm], labels[perm]


def write_glyph_dataset(root: str, n: int, seed: int = 0, size: int = 28):
    """Materialize a glyph corpus in idx layout under `root`."""
    images, labels = make_glyphs(n, seed=seed, size=size)
    dataio.write_idx(os.path.join(root, "images.idx"), images)
    dataio.write_idx(os.path.join(root, "labels.idx"),
                     labels.astype(np.uint8))
    return dataio.DatasetSpec(format="idx", root=root, channels=1,
                              image_size=size, with_labels=True)
