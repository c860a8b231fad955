"""Deterministic synthetic style images for demos and tests."""
from __future__ import annotations

import numpy as np

PROMPTS = (
    "red and blue diagonal stripes",
    "green checkerboard tiles",
    "orange ring on purple ground",
    "yellow blocks with dark border",
)


def style_image(kind, size=32, seed=0, channels=3):
    """One of four high-contrast patterns, ``(size, size, channels)`` in [0, 1].

    Single-channel patterns use levels 0.1/0.9 instead of the colours' luma, so
    their edges clear the default Canny thresholds.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    c1, c2 = rng.uniform(0.0, 1.0, 3), rng.uniform(0.0, 1.0, 3)
    if kind == 0:
        mask = (np.floor((xx + yy) * 4) % 2).astype(bool)
        c1, c2 = np.array([0.9, 0.1, 0.1]), np.array([0.1, 0.2, 0.9])
    elif kind == 1:
        mask = ((np.floor(xx * 4) + np.floor(yy * 4)) % 2).astype(bool)
        c1, c2 = np.array([0.1, 0.7, 0.2]), np.array([0.95, 0.95, 0.8])
    elif kind == 2:
        r = np.hypot(xx - 0.5, yy - 0.5)
        mask = (r > 0.2) & (r < 0.35)
        c1, c2 = np.array([1.0, 0.6, 0.1]), np.array([0.4, 0.1, 0.5])
    elif kind == 3:
        mask = (xx > 0.2) & (xx < 0.8) & (yy > 0.2) & (yy < 0.8)
        c1, c2 = np.array([0.95, 0.9, 0.2]), np.array([0.1, 0.1, 0.15])
    else:
        mask = rng.random((size, size)) > 0.5
    if channels == 1:
        return np.where(mask, 0.9, 0.1)[:, :, None]
    img = np.where(mask[:, :, None], c1, c2)
    return np.clip(img, 0.0, 1.0)


def style_set(count=4, size=32, channels=3):
    images = [style_image(k % 4, size, seed=k, channels=channels) for k in range(count)]
    return images, list(PROMPTS[:count])


def content_image(size=16, kind=0):
    """Simple structural content: a bright square or a cross on a dark field."""
    img = np.full((size, size, 3), 0.1)
    a, b = size // 4, 3 * size // 4
    if kind == 0:
        img[a:b, a:b] = 0.9
    else:
        img[size // 2 - 1:size // 2 + 1, :] = 0.9
        img[:, size // 2 - 1:size // 2 + 1] = 0.9
    return img
