"""Raster helpers: validation, PNG I/O, bilinear resize, patch crops, Canny, SSIM.

Images are float arrays of shape ``(H, W, C)`` with ``C`` in {1, 3} and values in
[0, 1].  Edge maps are ``uint8`` arrays of shape ``(H, W)`` holding 0/1.
"""
from __future__ import annotations

from collections import deque
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

MIN_SIZE = 8
LUMA = np.array([0.299, 0.587, 0.114])

CANNY_LOW = 100.0
CANNY_HIGH = 200.0
CANNY_SIGMA = 1.4
CANNY_KSIZE = 5
# Magnitudes are rounded before suppression so that mirror-symmetric ties compare equal.
MAG_DECIMALS = 6

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class ImageError(ValueError):
    """Invalid image contents or dimensions."""


def check_image(img, min_size=MIN_SIZE, name="image"):
    """Validate an image and return it as a float64 ``(H, W, C)`` array.

    2-D input is promoted to a single channel.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ImageError(f"{name}: expected (H, W, 1|3), got shape {arr.shape}")
    h, w = arr.shape[:2]
    if h < min_size or w < min_size:
        raise ImageError(f"{name}: {w}x{h} is smaller than the {min_size}px minimum")
    if not np.all(np.isfinite(arr)):
        raise ImageError(f"{name}: non-finite pixel values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ImageError(f"{name}: pixel values outside [0, 1]")
    return arr


def to_luma(img):
    """``(H, W)`` luma plane of a 1- or 3-channel image."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.shape[2] == 1:
        return arr[:, :, 0]
    return arr @ LUMA


def to_channels(img, channels):
    """Convert between 1 and 3 channels (luma down, replication up)."""
    arr = check_image(img, min_size=1)
    if arr.shape[2] == channels:
        return arr
    if channels == 1:
        return to_luma(arr)[:, :, None]
    if channels == 3:
        return np.repeat(arr, 3, axis=2)
    raise ImageError(f"unsupported channel count {channels}")


def read_png(path):
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return check_image(arr, name=str(path))


def write_png(img, path):
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    q = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q).save(Path(path), format="PNG")


def write_edges(edges, path):
    Image.fromarray((np.asarray(edges, dtype=np.uint8) * 255)).save(Path(path), format="PNG")


# ---------------------------------------------------------------- resampling

def _bilinear(arr, new_h, new_w):
    h, w, _ = arr.shape

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = coords(new_h, h)
    x0, x1, fx = coords(new_w, w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
    bot = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    return np.clip(top * (1 - fy) + bot * fy, 0.0, 1.0)


def resize_bilinear(img, new_w, new_h):
    """Bilinear resize using half-pixel centres and edge clamping."""
    if new_w < MIN_SIZE or new_h < MIN_SIZE:
        raise ImageError(f"target size {new_w}x{new_h} is below the {MIN_SIZE}px minimum")
    arr = check_image(img, min_size=1)
    if arr.shape[:2] == (new_h, new_w):
        return arr.copy()
    return _bilinear(arr, new_h, new_w)


def crop_patches(img, patch_size, n=10, seed=0):
    """``n`` square crops at uniformly sampled top-left corners."""
    arr = check_image(img, min_size=1)
    h, w = arr.shape[:2]
    if n < 1:
        raise ValueError("n must be >= 1")
    if patch_size > min(h, w):
        raise ImageError(f"patch {patch_size}px does not fit in {w}x{h} image")
    rng = np.random.default_rng(seed)
    ys = rng.integers(0, h - patch_size + 1, size=n)
    xs = rng.integers(0, w - patch_size + 1, size=n)
    return [arr[y:y + patch_size, x:x + patch_size].copy() for y, x in zip(ys, xs)]


# ---------------------------------------------------------------- canny

def gaussian_kernel(size, sigma):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


def _correlate(plane, kernel):
    r = kernel.shape[0] // 2
    padded = np.pad(plane, r, mode="edge")
    win = sliding_window_view(padded, kernel.shape)
    return np.einsum("ijkl,kl->ij", win, kernel)


def _step_peak():
    # Largest blurred-Sobel response to an ideal 0 -> 1 step.
    step = np.zeros((4 * CANNY_KSIZE, 4 * CANNY_KSIZE))
    step[:, 2 * CANNY_KSIZE:] = 1.0
    blurred = _correlate(step, gaussian_kernel(CANNY_KSIZE, CANNY_SIGMA))
    return float(np.abs(_correlate(blurred, SOBEL_X)).max())


MAG_SCALE = 255.0 / _step_peak()


def canny_gradients(plane):
    """Blur, Sobel, scaled magnitude (0-255 for a full step) and angle in degrees [0, 180)."""
    blurred = _correlate(plane, gaussian_kernel(CANNY_KSIZE, CANNY_SIGMA))
    gx = _correlate(blurred, SOBEL_X)
    gy = _correlate(blurred, SOBEL_Y)
    mag = np.round(np.hypot(gx, gy) * MAG_SCALE, MAG_DECIMALS)
    angle = np.degrees(np.arctan2(gy, gx)) % 180.0
    return mag, angle


def non_max_suppression(mag, angle):
    """Keep pixels that beat the previous neighbour and tie-or-beat the next one.

    Directions are quantised to 0/45/90/135 degrees; the asymmetric comparison
    keeps exactly one pixel of a two-pixel plateau.
    """
    h, w = mag.shape
    p = np.pad(mag, 1, mode="constant")
    sector = np.zeros(mag.shape, dtype=int)
    sector[(angle >= 22.5) & (angle < 67.5)] = 1
    sector[(angle >= 67.5) & (angle < 112.5)] = 2
    sector[(angle >= 112.5) & (angle < 157.5)] = 3
    # (dy, dx) of the "previous" neighbour per sector; "next" is the mirror.
    offsets = {0: (0, -1), 1: (-1, -1), 2: (-1, 0), 3: (-1, 1)}
    before = np.zeros_like(mag)
    after = np.zeros_like(mag)
    for s, (dy, dx) in offsets.items():
        m = sector == s
        before[m] = p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w][m]
        after[m] = p[1 - dy:1 - dy + h, 1 - dx:1 - dx + w][m]
    keep = (mag > before) & (mag >= after) & (mag > 0)
    return np.where(keep, mag, 0.0)


def hysteresis(nms, low, high):
    strong = nms >= high
    weak = nms >= low
    out = np.zeros(nms.shape, dtype=np.uint8)
    queue = deque(zip(*np.nonzero(strong)))
    for y, x in queue:
        out[y, x] = 1
    h, w = nms.shape
    while queue:
        y, x = queue.popleft()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and weak[yy, xx] and not out[yy, xx]:
                    out[yy, xx] = 1
                    queue.append((yy, xx))
    return out


def canny(img, low=CANNY_LOW, high=CANNY_HIGH):
    """Binary Canny edge map; thresholds are on the 0-255 magnitude scale."""
    if not low < high:
        raise ValueError(f"low threshold {low} must be below high threshold {high}")
    arr = check_image(img)
    mag, angle = canny_gradients(to_luma(arr))
    return hysteresis(non_max_suppression(mag, angle), low, high)


def edge_f1(pred, target):
    """F1 overlap of two binary edge maps (1.0 when both are empty)."""
    p = np.asarray(pred, dtype=bool)
    t = np.asarray(target, dtype=bool)
    tp = np.sum(p & t)
    denom = p.sum() + t.sum()
    return 1.0 if denom == 0 else float(2 * tp / denom)


# ---------------------------------------------------------------- ssim

def _window_1d(size, sigma):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(plane, g):
    rows = sliding_window_view(plane, g.size, axis=0) @ g
    return sliding_window_view(rows, g.size, axis=1) @ g


def ssim(a, b):
    """Mean SSIM over all fully-contained Gaussian windows (luma, dynamic range 1).

    Images smaller than the 11px window use the largest odd window that fits.
    """
    a = check_image(a, name="a")
    b = check_image(b, name="b")
    if a.shape[:2] != b.shape[:2]:
        raise ImageError(f"size mismatch: {a.shape[1]}x{a.shape[0]} vs {b.shape[1]}x{b.shape[0]}")
    x, y = to_luma(a), to_luma(b)
    size = min(SSIM_WIN, *x.shape)
    size -= 1 - size % 2
    g = _window_1d(size, SSIM_SIGMA)
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))
