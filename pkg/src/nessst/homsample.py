"""Homographies: application, inversion, normalized DLT, constrained sampling, warped patches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imgcore import InvalidInput, bilinear_sample


class SingularHomography(ValueError):
    pass


class PointAtInfinity(ValueError):
    pass


class SamplerConfigError(ValueError):
    """The rejection sampler could not produce an admissible warp."""


MAX_REJECTIONS = 1000


def normalize(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-2:] != (3, 3):
        raise InvalidInput(f"homography must be 3x3, got {h.shape}")
    s = h[..., 2:3, 2:3]
    if np.any(np.abs(s) < 1e-12):
        raise SingularHomography("bottom-right entry is zero; cannot normalize")
    return h / s


def apply(h, pts) -> np.ndarray:
    """Map points ``(..., 2)`` through ``h`` with homogeneous division."""
    h = np.asarray(h, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    x, y = pts[..., 0], pts[..., 1]
    den = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    if np.any(np.abs(den) < 1e-12):
        raise PointAtInfinity("point maps to infinity")
    u = (h[0, 0] * x + h[0, 1] * y + h[0, 2]) / den
    v = (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / den
    return np.stack([u, v], axis=-1)


def apply_batch(hs, pts) -> np.ndarray:
    """Apply a stack of homographies ``(N, 3, 3)`` to points ``(N, ..., 2)``."""
    hs = np.asarray(hs, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    extra = (slice(None),) + (None,) * (pts.ndim - 2)

    def e(i, j):
        return hs[:, i, j][extra]

    x, y = pts[..., 0], pts[..., 1]
    den = e(2, 0) * x + e(2, 1) * y + e(2, 2)
    if np.any(np.abs(den) < 1e-12):
        raise PointAtInfinity("point maps to infinity")
    u = (e(0, 0) * x + e(0, 1) * y + e(0, 2)) / den
    v = (e(1, 0) * x + e(1, 1) * y + e(1, 2)) / den
    return np.stack([u, v], axis=-1)


def invert(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    scale = np.abs(h).max(axis=(-2, -1), keepdims=True)
    det = np.linalg.det(h / scale)
    if np.any(np.abs(det) < 1e-12):
        raise SingularHomography("homography is singular")
    return normalize(np.linalg.inv(h))


def translation(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def _hartley(pts):
    # pts: (N, k, 2) -> similarity transforms (N, 3, 3) with centroid 0, mean distance sqrt(2)
    c = pts.mean(axis=1)
    d = np.sqrt(((pts - c[:, None, :]) ** 2).sum(axis=-1)).mean(axis=1)
    s = np.sqrt(2.0) / np.where(d > 0, d, 1.0)
    t = np.zeros((pts.shape[0], 3, 3))
    t[:, 0, 0] = s
    t[:, 1, 1] = s
    t[:, 0, 2] = -s * c[:, 0]
    t[:, 1, 2] = -s * c[:, 1]
    t[:, 2, 2] = 1.0
    return t


def dlt(src, dst) -> np.ndarray:
    """Normalized direct linear transform.

    ``src``/``dst`` are ``(k, 2)`` for a single homography or ``(N, k, 2)`` for a batch,
    ``k >= 4``. Returns homographies with ``H[2, 2] = 1`` mapping src onto dst.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    single = src.ndim == 2
    if single:
        src, dst = src[None], dst[None]
    if src.shape != dst.shape or src.shape[1] < 4:
        raise InvalidInput(f"need matching (N, k>=4, 2) point sets, got {src.shape} and {dst.shape}")
    ts, td = _hartley(src), _hartley(dst)
    ps = apply_batch(ts, src)
    pd = apply_batch(td, dst)
    n, k = src.shape[:2]
    x, y = ps[..., 0], ps[..., 1]
    u, v = pd[..., 0], pd[..., 1]
    zero, one = np.zeros_like(x), np.ones_like(x)
    rows_u = np.stack([-x, -y, -one, zero, zero, zero, u * x, u * y, u], axis=-1)
    rows_v = np.stack([zero, zero, zero, -x, -y, -one, v * x, v * y, v], axis=-1)
    a = np.concatenate([rows_u, rows_v], axis=1)
    _, _, vt = np.linalg.svd(a)
    hn = vt[:, -1, :].reshape(n, 3, 3)
    h = np.linalg.inv(td) @ hn @ ts
    h = normalize(h)
    return h[0] if single else h


@dataclass(frozen=True)
class HomographySamplerConfig:
    d: float = 2.0
    outer: float = 10.0
    jitter: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.d < self.outer:
            raise InvalidInput(f"need 0 < d < outer, got d={self.d}, outer={self.outer}")
        if not 0 <= self.jitter <= 0.5:
            raise InvalidInput(f"jitter must be in [0, 0.5], got {self.jitter}")

    @property
    def corners(self) -> np.ndarray:
        """Outer-square corners in the local frame, clockwise from top-left."""
        a = 0.5 * self.outer
        return np.array([[-a, -a], [a, -a], [a, a], [-a, a]])


def corners_admissible(cfg: HomographySamplerConfig, warped) -> np.ndarray:
    """True where no warped corner falls inside the central square of edge ``d``."""
    warped = np.asarray(warped, dtype=np.float64)
    half = 0.5 * cfg.d
    inside = (np.abs(warped[..., 0]) < half) & (np.abs(warped[..., 1]) < half)
    return ~inside.any(axis=-1)


def sample_offsets(cfg: HomographySamplerConfig, rng: np.random.Generator, m: int) -> np.ndarray:
    """Draw ``m`` admissible corner displacements ``(m, 4, 2)``.

    All ``m`` sets are drawn at once as ``uniform(-J, J)`` with ``J = jitter * outer``;
    rejected rows are redrawn together, in index order, until admissible.
    """
    amp = cfg.jitter * cfg.outer
    off = rng.uniform(-amp, amp, size=(m, 4, 2))
    bad = ~corners_admissible(cfg, cfg.corners + off)
    tries = 0
    while bad.any():
        tries += 1
        if tries >= MAX_REJECTIONS:
            raise SamplerConfigError(
                f"{MAX_REJECTIONS} consecutive rejections: d={cfg.d} too large for jitter={cfg.jitter}"
            )
        idx = np.flatnonzero(bad)
        off[idx] = rng.uniform(-amp, amp, size=(len(idx), 4, 2))
        bad[idx] = ~corners_admissible(cfg, cfg.corners + off[idx])
    return off


def sample_homographies(cfg: HomographySamplerConfig, rng: np.random.Generator, m: int) -> np.ndarray:
    """``m`` local-frame homographies mapping the outer square to perturbed copies of it."""
    off = sample_offsets(cfg, rng, m)
    src = np.broadcast_to(cfg.corners, off.shape)
    hs = dlt(src, cfg.corners + off)
    # exact identity where nothing moved
    still = np.all(off == 0, axis=(1, 2))
    hs[still] = np.eye(3)
    return hs


def sample_homography(cfg: HomographySamplerConfig, rng: np.random.Generator) -> np.ndarray:
    return sample_homographies(cfg, rng, 1)[0]


def centered(h_local, center) -> np.ndarray:
    """Express a local-frame homography around ``center`` in image coordinates."""
    cx, cy = center
    return translation(cx, cy) @ np.asarray(h_local) @ translation(-cx, -cy)


def make_grid(center, p: int) -> np.ndarray:
    """``(p*p, 2)`` lattice of integer offsets around ``center``, row-major."""
    if p < 3 or p % 2 == 0:
        raise InvalidInput(f"grid size must be odd and >= 3, got {p}")
    r = p // 2
    off = np.arange(-r, r + 1, dtype=np.float64)
    gy, gx = np.meshgrid(off, off, indexing="ij")
    return np.stack([gx.ravel() + center[0], gy.ravel() + center[1]], axis=-1)


def extract_patch(img, h_inv, grid) -> np.ndarray:
    """Map grid points through ``h_inv`` and sample the image there; returns a ``p x p`` patch."""
    grid = np.asarray(grid, dtype=np.float64)
    p = int(round(np.sqrt(grid.shape[0])))
    src = apply(h_inv, grid)
    return bilinear_sample(img, src[:, 0], src[:, 1]).reshape(p, p)


def format_homographies(hs) -> str:
    lines = []
    for h in np.asarray(hs, dtype=np.float64).reshape(-1, 3, 3):
        lines.append(" ".join(f"{v:.17g}" for v in h.ravel()))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_homographies(text: str) -> np.ndarray:
    rows = [line.split() for line in text.splitlines() if line.strip()]
    for r in rows:
        if len(r) != 9:
            raise InvalidInput(f"expected 9 values per line, got {len(r)}")
    return np.array(rows, dtype=np.float64).reshape(-1, 3, 3)
