"""Image loading, separable Gaussian filtering, Sobel gradients and bilinear sampling.

Images are plain 2-D float64 numpy arrays indexed ``img[row, col]`` (``y``, ``x``).
The filtering helpers operate on the last two axes, so a stack of patches of
shape ``(..., h, w)`` is filtered exactly like a single image.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image

LUMA = (0.299, 0.587, 0.114)

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 8.0
SOBEL_Y = SOBEL_X.T.copy()


class InvalidInput(ValueError):
    """Raised when an image or parameter violates an operation's precondition."""


def check_image(img, min_size: int = 1) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim < 2:
        raise InvalidInput(f"expected an image with at least 2 dims, got shape {arr.shape}")
    if arr.shape[-1] < min_size or arr.shape[-2] < min_size:
        raise InvalidInput(f"image must be at least {min_size}x{min_size}, got {arr.shape[-2:]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput("image contains non-finite values")
    return arr


def load_image(path) -> np.ndarray:
    """Read a PGM/PNG file as a grayscale image scaled to [0, 1]."""
    path = Path(path)
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            scale = 65535.0 if arr.max(initial=0) > 255 or im.mode.startswith("I;16") else 255.0
            return arr / scale
        if im.mode == "L":
            return np.asarray(im, dtype=np.float64) / 255.0
        if im.mode in ("LA", "P", "PA", "1"):
            im = im.convert("RGBA" if "A" in im.mode or im.mode == "P" else "L")
            if im.mode == "L":
                return np.asarray(im, dtype=np.float64) / 255.0
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    return (rgb[..., 0] * LUMA[0] + rgb[..., 1] * LUMA[1] + rgb[..., 2] * LUMA[2]) / 255.0


def save_pgm(img, path, normalize: bool = False) -> None:
    """Write an 8-bit binary PGM. With ``normalize`` the values are min-max stretched first."""
    arr = np.asarray(img, dtype=np.float64)
    if normalize:
        lo, hi = (float(arr.min()), float(arr.max())) if arr.size else (0.0, 0.0)
        arr = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def gaussian_kernel(sigma: float, radius: int | None = None) -> np.ndarray:
    """Normalized symmetric 1-D Gaussian of length ``2 * radius + 1``.

    ``radius`` defaults to ``ceil(3 * sigma)``.
    """
    if not sigma > 0:
        raise InvalidInput(f"sigma must be > 0, got {sigma}")
    if radius is None:
        radius = int(math.ceil(3.0 * sigma))
    if radius < 0:
        raise InvalidInput(f"radius must be >= 0, got {radius}")
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    w /= w.sum()
    # exact symmetry regardless of summation rounding
    return 0.5 * (w + w[::-1])


def _correlate_axis(arr: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = (len(k) - 1) // 2
    if r == 0:
        return arr * k[0]
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (r, r)
    padded = np.pad(arr, pad, mode="edge")
    n = arr.shape[axis]
    out = np.zeros_like(arr)
    for i, wi in enumerate(k):
        out += wi * np.take(padded, np.arange(i, i + n), axis=axis)
    return out


def convolve_separable(img, k) -> np.ndarray:
    """Filter rows then columns with ``k`` using edge replication.

    For symmetric kernels correlation and convolution coincide.
    """
    arr = check_image(img)
    k = np.asarray(k, dtype=np.float64)[::-1]
    out = _correlate_axis(arr, k, arr.ndim - 1)
    return _correlate_axis(out, k, arr.ndim - 2)


def gaussian_blur(img, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return check_image(img).copy()
    return convolve_separable(img, gaussian_kernel(sigma))


def gradients(img) -> tuple[np.ndarray, np.ndarray]:
    """Sobel derivatives scaled by 1/8, so that ``I = x`` gives ``Ix = 1``."""
    arr = check_image(img, min_size=3)
    nd = arr.ndim
    pad = [(0, 0)] * (nd - 2) + [(1, 1), (1, 1)]
    p = np.pad(arr, pad, mode="edge")
    h, w = arr.shape[-2:]

    def win(dy, dx):
        return p[..., 1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]

    ix = ((win(-1, 1) - win(-1, -1)) + 2.0 * (win(0, 1) - win(0, -1)) + (win(1, 1) - win(1, -1))) / 8.0
    iy = ((win(1, -1) - win(-1, -1)) + 2.0 * (win(1, 0) - win(-1, 0)) + (win(1, 1) - win(-1, 1))) / 8.0
    return ix, iy


def bilinear_sample(img, x, y):
    """Bilinear interpolation at ``(x, y)``; coordinates are clamped to the image.

    Accepts scalars or broadcastable arrays and returns the same shape.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, w - 1.0)
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    out = top * (1.0 - fy) + bot * fy
    return float(out) if out.ndim == 0 else out


def crop(img, row: int, col: int, size: int) -> np.ndarray:
    """``size x size`` window centered on an integer pixel, edge-replicated past the border."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    r = size // 2
    rows = np.clip(np.arange(row - r, row - r + size), 0, h - 1)
    cols = np.clip(np.arange(col - r, col - r + size), 0, w - 1)
    return img[np.ix_(rows, cols)]
