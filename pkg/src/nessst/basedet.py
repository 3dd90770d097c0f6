"""Handcrafted detector responses, strict non-maximum suppression and sub-pixel refinement."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .imgcore import InvalidInput, check_image, gaussian_blur, gaussian_kernel, convolve_separable, gradients


class DetectorKind(str, Enum):
    SHI_TOMASI = "ShiTomasi"
    HARRIS = "Harris"
    DOH = "DoH"
    LOG = "LoG"


@dataclass(frozen=True)
class DetectorConfig:
    kind: DetectorKind = DetectorKind.SHI_TOMASI
    # 0 disables derivative pre-smoothing
    sigma_d: float = 1.0
    # integration window; also the scale of DoH / LoG
    sigma_w: float = 2.0
    nms_radius: int = 2
    harris_k: float = 0.04

    def __post_init__(self):
        object.__setattr__(self, "kind", DetectorKind(self.kind))
        if self.sigma_d < 0 or not self.sigma_w > 0:
            raise InvalidInput(f"invalid detector scales sigma_d={self.sigma_d}, sigma_w={self.sigma_w}")
        if self.nms_radius < 1:
            raise InvalidInput(f"nms_radius must be >= 1, got {self.nms_radius}")


def structure_tensor(img, cfg: DetectorConfig = DetectorConfig()):
    """Gaussian-windowed second-moment matrix entries ``(A, B, C)``.

    ``A = w * Ix^2``, ``B = w * Ix Iy``, ``C = w * Iy^2``. Works on a single image or a
    stack of patches; borders are replicated at every filtering stage.
    """
    arr = check_image(img, min_size=3)
    smoothed = gaussian_blur(arr, cfg.sigma_d)
    ix, iy = gradients(smoothed)
    k = gaussian_kernel(cfg.sigma_w)
    a = convolve_separable(ix * ix, k)
    b = convolve_separable(ix * iy, k)
    c = convolve_separable(iy * iy, k)
    return a, b, c


def shi_tomasi_score(a, b, c) -> np.ndarray:
    """Smallest eigenvalue of ``[[A, B], [B, C]]``, clamped at zero."""
    a, b, c = (np.asarray(v, dtype=np.float64) for v in (a, b, c))
    half_diff = 0.5 * (a - c)
    lam = 0.5 * (a + c) - np.sqrt(half_diff * half_diff + b * b)
    return np.maximum(lam, 0.0)


def harris_score(a, b, c, k: float = 0.04) -> np.ndarray:
    a, b, c = (np.asarray(v, dtype=np.float64) for v in (a, b, c))
    tr = a + c
    return (a * c - b * b) - k * tr * tr


def hessian(img, sigma: float):
    """Second derivatives ``(Ixx, Ixy, Iyy)`` of the Gaussian-smoothed image by central differences."""
    arr = check_image(img, min_size=3)
    s = gaussian_blur(arr, sigma)
    pad = [(0, 0)] * (s.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(s, pad, mode="edge")
    h, w = s.shape[-2:]

    def win(dy, dx):
        return p[..., 1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]

    ixx = win(0, 1) - 2.0 * s + win(0, -1)
    iyy = win(1, 0) - 2.0 * s + win(-1, 0)
    ixy = 0.25 * (win(1, 1) - win(1, -1) - win(-1, 1) + win(-1, -1))
    return ixx, ixy, iyy


def doh_from_hessian(ixx, ixy, iyy, sigma: float) -> np.ndarray:
    return sigma**4 * (np.asarray(ixx) * np.asarray(iyy) - np.asarray(ixy) ** 2)


def log_from_hessian(ixx, iyy, sigma: float) -> np.ndarray:
    return np.abs(sigma**2 * (np.asarray(ixx) + np.asarray(iyy)))


def doh_score(img, sigma: float) -> np.ndarray:
    ixx, ixy, iyy = hessian(img, sigma)
    return doh_from_hessian(ixx, ixy, iyy, sigma)


def log_score(img, sigma: float) -> np.ndarray:
    ixx, _, iyy = hessian(img, sigma)
    return log_from_hessian(ixx, iyy, sigma)


def score_map(img, cfg: DetectorConfig = DetectorConfig()) -> np.ndarray:
    """Dense response of the configured base detector (image or patch stack)."""
    if cfg.kind is DetectorKind.SHI_TOMASI:
        return shi_tomasi_score(*structure_tensor(img, cfg))
    if cfg.kind is DetectorKind.HARRIS:
        return harris_score(*structure_tensor(img, cfg), k=cfg.harris_k)
    if cfg.kind is DetectorKind.DOH:
        return doh_score(img, cfg.sigma_w)
    return log_score(img, cfg.sigma_w)


def nms(score, radius: int, threshold: float = 0.0) -> np.ndarray:
    """Boolean mask of pixels strictly greater than every other pixel in their window.

    Plateaus yield nothing, and a band of ``radius`` pixels along the border is never flagged.
    """
    s = np.asarray(score, dtype=np.float64)
    if radius < 1:
        raise InvalidInput(f"radius must be >= 1, got {radius}")
    h, w = s.shape
    mask = np.zeros((h, w), dtype=bool)
    if h <= 2 * radius or w <= 2 * radius:
        return mask
    core = s[radius : h - radius, radius : w - radius]
    keep = core > threshold
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            nb = s[radius + dy : h - radius + dy, radius + dx : w - radius + dx]
            keep &= core > nb
    mask[radius : h - radius, radius : w - radius] = keep
    return mask


def subpixel_refine(score, row: int, col: int) -> tuple[float, float]:
    """One Newton step on the score surface around an integer extremum.

    Returns the offset ``(dx, dy)``. Falls back to ``(0, 0)`` when the finite-difference
    Hessian is singular or the step leaves the pixel (``|d|_inf > 0.5``).
    """
    s = np.asarray(score, dtype=np.float64)
    h, w = s.shape
    if not (1 <= row < h - 1 and 1 <= col < w - 1):
        raise InvalidInput(f"location ({col}, {row}) is on the border of a {w}x{h} map")
    c = s[row, col]
    gx = 0.5 * (s[row, col + 1] - s[row, col - 1])
    gy = 0.5 * (s[row + 1, col] - s[row - 1, col])
    hxx = s[row, col + 1] - 2.0 * c + s[row, col - 1]
    hyy = s[row + 1, col] - 2.0 * c + s[row - 1, col]
    hxy = 0.25 * (s[row + 1, col + 1] - s[row + 1, col - 1] - s[row - 1, col + 1] + s[row - 1, col - 1])
    det = hxx * hyy - hxy * hxy
    if abs(det) < 1e-12:
        return 0.0, 0.0
    dx = -(hyy * gx - hxy * gy) / det
    dy = -(-hxy * gx + hxx * gy) / det
    if max(abs(dx), abs(dy)) > 0.5:
        return 0.0, 0.0
    return float(dx), float(dy)
