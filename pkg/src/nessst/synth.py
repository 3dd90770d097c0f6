"""Rendered test imagery: checkerboard corners, step edges, Gaussian blobs and textures."""

from __future__ import annotations

import numpy as np

from .imgcore import gaussian_blur


def render(fn, shape, ss: int = 4) -> np.ndarray:
    """Area-average ``fn(x, y)`` over each pixel with ``ss x ss`` supersampling.

    Pixel ``(r, c)`` covers ``[c - 0.5, c + 0.5] x [r - 0.5, r + 0.5]``.
    """
    h, w = shape
    sub = (np.arange(ss) + 0.5) / ss - 0.5
    ys = np.arange(h)[:, None] + sub[None, :]
    xs = np.arange(w)[:, None] + sub[None, :]
    yy = ys.reshape(h, 1, ss, 1)
    xx = xs.reshape(1, w, 1, ss)
    return np.asarray(fn(xx, yy), dtype=np.float64).mean(axis=(2, 3))


def checker_corner(shape, center, lo: float = 0.2, hi: float = 0.8, angle: float = 0.0) -> np.ndarray:
    cx, cy = center
    ca, sa = np.cos(angle), np.sin(angle)

    def fn(x, y):
        u = (x - cx) * ca + (y - cy) * sa
        v = -(x - cx) * sa + (y - cy) * ca
        return np.where((u > 0) == (v > 0), hi, lo)

    return render(fn, shape)


def step_edge(shape, point, angle: float = 0.0, lo: float = 0.2, hi: float = 0.8) -> np.ndarray:
    """Straight edge through ``point``; ``angle`` is the edge normal direction."""
    px, py = point
    ca, sa = np.cos(angle), np.sin(angle)
    return render(lambda x, y: np.where((x - px) * ca + (y - py) * sa > 0, hi, lo), shape)


def gaussian_blob(shape, center, sigma: float = 2.0, amplitude: float = 0.6, base: float = 0.2) -> np.ndarray:
    cx, cy = center
    h, w = shape
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    return base + amplitude * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * sigma * sigma))


def corner_edge_fixture(seed: int = 0, size: int = 64, noise: float = 0.0):
    """A checkerboard corner on the left half, a vertical step edge on the right half.

    Returns ``(image, corner_xy, edge_xy)``.
    """
    corner = (size * 0.25, size * 0.5)
    edge = (size * 0.75, size * 0.5)
    half = size // 2
    img = np.empty((size, size))
    img[:, :half] = checker_corner((size, size), corner)[:, :half]
    img[:, half:] = step_edge((size, size), edge)[:, half:]
    if noise > 0:
        img = img + np.random.default_rng(seed).normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0), corner, edge


def textured(shape, seed: int = 0, n_rects: int = 160, noise: float = 0.08) -> np.ndarray:
    """Overlapping opaque rectangles of high-contrast intensities plus smoothed noise.

    Dense, distinctive corners and T-junctions; lightly blurred to avoid aliasing.
    """
    rng = np.random.default_rng(seed)
    h, w = shape
    img = np.full(shape, 0.5)
    for _ in range(n_rects):
        x0, y0 = rng.uniform(-8, w), rng.uniform(-8, h)
        rw, rh = rng.uniform(8, max(w / 6, 8.0)), rng.uniform(8, max(h / 6, 8.0))
        x1, y1 = int(min(w, x0 + rw)), int(min(h, y0 + rh))
        img[max(int(y0), 0) : y1, max(int(x0), 0) : x1] = rng.choice([0.05, 0.3, 0.7, 0.95])
    img = img + noise * gaussian_blur(rng.normal(0.0, 1.0, shape), 1.5) * 4.0
    return np.clip(gaussian_blur(img, 0.7), 0.0, 1.0)


def wedge(shape, tip, opening: float, rot: float = 0.0, lo: float = 0.1, hi: float = 0.9) -> np.ndarray:
    """Angular sector of the given ``opening`` (radians) with its tip at ``tip``."""
    cx, cy = tip

    def fn(x, y):
        a = np.arctan2(y - cy, x - cx) - rot
        a = (a + np.pi) % (2.0 * np.pi) - np.pi
        return np.where(np.abs(a) < 0.5 * opening, hi, lo)

    return render(fn, shape)


def t_junction(shape, center, rot: float = 0.0, levels=(0.1, 0.5, 0.9)) -> np.ndarray:
    cx, cy = center
    ca, sa = np.cos(rot), np.sin(rot)

    def fn(x, y):
        u = (x - cx) * ca + (y - cy) * sa
        v = -(x - cx) * sa + (y - cy) * ca
        return np.where(v < 0, levels[0], np.where(u < 0, levels[1], levels[2]))

    return render(fn, shape)


PATTERNS = ("corner", "wedge", "tjunction", "blob", "edge")


def pattern_image(kind: str, rng: np.random.Generator, size: int = 48, noise: float = 0.01) -> np.ndarray:
    """One randomly posed high-contrast pattern near the image center."""
    c = (size / 2 + rng.uniform(-2, 2), size / 2 + rng.uniform(-2, 2))
    lo = rng.uniform(0.0, 0.15)
    hi = rng.uniform(0.85, 1.0)
    ang = rng.uniform(0, 2 * np.pi)
    if kind == "corner":
        img = checker_corner((size, size), c, lo, hi, angle=ang)
    elif kind == "wedge":
        img = wedge((size, size), c, rng.uniform(0.6, 2.4), ang, lo, hi)
    elif kind == "tjunction":
        img = t_junction((size, size), c, ang, (lo, 0.5 * (lo + hi), hi))
    elif kind == "blob":
        img = gaussian_blob((size, size), c, sigma=rng.uniform(1.2, 2.5), amplitude=hi - lo, base=lo)
    elif kind == "edge":
        img = step_edge((size, size), c, angle=ang, lo=lo, hi=hi)
    else:
        raise ValueError(f"unknown pattern {kind!r}")
    if noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def pattern_images(count: int, seed: int = 0, size: int = 48) -> list[np.ndarray]:
    """Fixture set cycling through every pattern kind, deterministic per seed."""
    rng = np.random.default_rng(seed)
    return [pattern_image(PATTERNS[i % len(PATTERNS)], rng, size) for i in range(count)]
