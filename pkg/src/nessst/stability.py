"""Monte-Carlo stability and repeatability scores, training targets and the assembled detectors.

A keypoint ``k`` is perturbed by ``m`` random local homographies. For each warp the
base detector is re-run on a ``p x p`` grid around the warped point, the best grid
location is mapped back to the reference frame, and the deviations from ``k`` are
summarized either by the spectral norm of their second-moment matrix (stability,
lower is better) or by the fraction within ``epsilon`` in the max-norm (repeatability).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import homsample
from .basedet import DetectorConfig, nms, score_map, subpixel_refine
from .imgcore import InvalidInput, check_image, crop

# patches scored per vectorized chunk; bounds peak memory
_CHUNK = 8192


class MarginError(InvalidInput):
    pass


class ConfigurationError(ValueError):
    pass


class Mode(str, Enum):
    ST = "ST"
    SS_ST = "SS-ST"
    RS_ST = "RS-ST"
    NESS_ST = "NeSS-ST"
    NERS_ST = "NeRS-ST"

    @property
    def neural(self) -> bool:
        return self in (Mode.NESS_ST, Mode.NERS_ST)


@dataclass(frozen=True)
class StabilityConfig:
    p: int = 5
    m: int = 100
    d: float = 2.0
    epsilon: float = 1.0
    t_shi: float = 0.005
    seed: int = 0
    # corner displacement bound as a fraction of the outer square edge p * d
    jitter: float = 0.25

    def __post_init__(self):
        if self.p < 3 or self.p % 2 == 0:
            raise InvalidInput(f"p must be odd and >= 3, got {self.p}")
        if self.m < 1:
            raise InvalidInput(f"m must be >= 1, got {self.m}")
        if not self.epsilon > 0:
            raise InvalidInput(f"epsilon must be > 0, got {self.epsilon}")
        if self.t_shi < 0:
            raise InvalidInput(f"t_shi must be >= 0, got {self.t_shi}")
        if not self.d > 0 or not 0 <= self.jitter <= 0.5:
            raise InvalidInput(f"need d > 0 and 0 <= jitter <= 0.5, got d={self.d}, jitter={self.jitter}")

    def sampler(self) -> homsample.HomographySamplerConfig:
        return homsample.HomographySamplerConfig(
            d=self.d, outer=self.p * self.d, jitter=self.jitter, seed=self.seed
        )


@dataclass
class Keypoint:
    x: float
    y: float
    s: float
    lam: float = 0.0
    r: float | None = None


@dataclass
class GroundTruthRecord:
    keypoint: Keypoint
    lambda_gt: float
    included: bool
    # integer extremum the targets were computed at
    row: int = 0
    col: int = 0


def keypoint_stream(seed: int, key: int) -> np.random.Generator:
    """Independent generator for one keypoint; ``key`` is its row-major pixel index."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(key)]))


def argmax_rowmajor(scores) -> np.ndarray:
    """Flat argmax over the last two axes; first (row-major) index wins ties."""
    s = np.asarray(scores)
    return np.argmax(s.reshape(s.shape[:-2] + (-1,)), axis=-1)


def patch_argmax(patch, detector: DetectorConfig = DetectorConfig()) -> tuple[int, int]:
    patch = check_image(patch, min_size=3)
    idx = int(argmax_rowmajor(score_map(patch, detector)))
    return divmod(idx, patch.shape[1])


def warp_deviations(img, centers, hs_local, detector: DetectorConfig, p: int) -> np.ndarray:
    """Back-warped argmax deviations from each center.

    ``centers`` is ``(K, 2)`` in ``(x, y)``; ``hs_local`` is ``(K, m, 3, 3)`` expressed in a
    frame whose origin is the center. Returns ``(K, m, 2)``.
    """
    img = np.asarray(img, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    hs_local = np.asarray(hs_local, dtype=np.float64)
    k, m = hs_local.shape[:2]
    flat_h = hs_local.reshape(k * m, 3, 3)
    flat_c = np.repeat(centers, m, axis=0)
    offsets = homsample.make_grid((0.0, 0.0), p)
    out = np.empty((k * m, 2))
    h, w = img.shape
    for lo in range(0, k * m, _CHUNK):
        hh = flat_h[lo : lo + _CHUNK]
        cc = flat_c[lo : lo + _CHUNK]
        hinv = np.linalg.inv(hh)
        warped = homsample.apply_batch(hh, np.zeros((len(hh), 2)))
        grid = warped[:, None, :] + offsets[None, :, :]
        src = homsample.apply_batch(hinv, grid) + cc[:, None, :]
        xs = np.clip(src[..., 0], 0.0, w - 1.0)
        ys = np.clip(src[..., 1], 0.0, h - 1.0)
        patches = _bilinear(img, xs, ys).reshape(len(hh), p, p)
        best = argmax_rowmajor(score_map(patches, detector))
        lhat = grid[np.arange(len(hh)), best]
        out[lo : lo + _CHUNK] = homsample.apply_batch(hinv, lhat[:, None, :])[:, 0, :]
    return out.reshape(k, m, 2)


def _bilinear(img, x, y):
    h, w = img.shape
    x0 = np.minimum(np.floor(x).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def covariance(deviations) -> np.ndarray:
    """Second moment of deviations about zero (the keypoint), ``(..., m, 2) -> (..., 2, 2)``."""
    dev = np.asarray(deviations, dtype=np.float64)
    return np.einsum("...mi,...mj->...ij", dev, dev) / dev.shape[-2]


def largest_eigenvalue(cov) -> np.ndarray:
    """Closed-form largest eigenvalue of symmetric 2x2 matrices."""
    cov = np.asarray(cov, dtype=np.float64)
    a, b, c = cov[..., 0, 0], cov[..., 0, 1], cov[..., 1, 1]
    half = 0.5 * (a - c)
    return 0.5 * (a + c) + np.sqrt(half * half + b * b)


def repeat_fraction(deviations, epsilon: float) -> np.ndarray:
    dev = np.asarray(deviations, dtype=np.float64)
    hit = np.abs(dev).max(axis=-1) < epsilon
    return hit.mean(axis=-1)


def _check_margin(img, k, p):
    h, w = img.shape
    x, y = k
    if not (p <= x <= w - 1 - p and p <= y <= h - 1 - p):
        raise MarginError(f"keypoint ({x}, {y}) closer than {p} px to the border of a {w}x{h} image")


def _as_xy(k):
    if isinstance(k, Keypoint):
        return (k.x, k.y)
    return (float(k[0]), float(k[1]))


def stability_score(img, k, detector: DetectorConfig, cfg: StabilityConfig, rng: np.random.Generator):
    """Return ``(Sigma, lambda)`` for one keypoint using ``cfg.m`` warps drawn from ``rng``."""
    img = check_image(img, min_size=3)
    xy = _as_xy(k)
    _check_margin(img, xy, cfg.p)
    hs = homsample.sample_homographies(cfg.sampler(), rng, cfg.m)
    dev = warp_deviations(img, [xy], hs[None], detector, cfg.p)[0]
    cov = covariance(dev)
    return cov, float(largest_eigenvalue(cov))


def repeatability_score(img, k, detector: DetectorConfig, cfg: StabilityConfig, rng: np.random.Generator) -> float:
    img = check_image(img, min_size=3)
    xy = _as_xy(k)
    _check_margin(img, xy, cfg.p)
    hs = homsample.sample_homographies(cfg.sampler(), rng, cfg.m)
    dev = warp_deviations(img, [xy], hs[None], detector, cfg.p)[0]
    return float(repeat_fraction(dev, cfg.epsilon))


def score_locations(img, rows, cols, detector: DetectorConfig, cfg: StabilityConfig, seed: int | None = None):
    """Stability and repeatability at integer pixels, one RNG stream per pixel.

    Returns ``(lam, r)`` arrays. Results do not depend on the order of the locations.
    """
    img = np.asarray(img, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if len(rows) == 0:
        return np.zeros(0), np.zeros(0)
    seed = cfg.seed if seed is None else seed
    sampler = cfg.sampler()
    w = img.shape[1]
    offs = np.stack(
        [homsample.sample_offsets(sampler, keypoint_stream(seed, int(r) * w + int(c)), cfg.m) for r, c in zip(rows, cols)]
    )
    hs = _homographies_from_offsets(sampler, offs.reshape(-1, 4, 2)).reshape(len(rows), cfg.m, 3, 3)
    centers = np.stack([cols, rows], axis=-1).astype(np.float64)
    dev = warp_deviations(img, centers, hs, detector, cfg.p)
    return largest_eigenvalue(covariance(dev)), repeat_fraction(dev, cfg.epsilon)


def _homographies_from_offsets(sampler, off):
    src = np.broadcast_to(sampler.corners, off.shape)
    hs = homsample.dlt(src, sampler.corners + off)
    hs[np.all(off == 0, axis=(1, 2))] = np.eye(3)
    return hs


def combine_scores(mask, lambda_hat) -> np.ndarray:
    """Dense final score: ``exp(-lambda_hat)`` at flagged pixels (row-major order), zero elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    lam = np.asarray(lambda_hat, dtype=np.float64).ravel()
    if lam.size != int(mask.sum()):
        raise InvalidInput(f"{lam.size} values for {int(mask.sum())} extrema")
    if np.any(lam < 0):
        raise InvalidInput("lambda_hat must be non-negative")
    out = np.zeros(mask.shape)
    out[mask] = np.exp(-lam)
    return out


def _extrema(img, detector):
    s_map = score_map(img, detector)
    mask = nms(s_map, detector.nms_radius, 0.0)
    rows, cols = np.nonzero(mask)
    return s_map, mask, rows, cols


def _rank(primary, s, flat_idx):
    # descending primary, then descending s, then ascending pixel index
    return np.lexsort((flat_idx, -s, -primary))


def _refined(s_map, row, col, s, lam=0.0, r=None) -> Keypoint:
    dx, dy = subpixel_refine(s_map, int(row), int(col))
    return Keypoint(x=col + dx, y=row + dy, s=float(s), lam=float(lam), r=None if r is None else float(r))


# patch side fed to the learned regressor
NET_PATCH = 17


def net_patches(img, rows, cols, q: int = NET_PATCH) -> np.ndarray:
    return np.stack([crop(img, int(r), int(c), q) for r, c in zip(rows, cols)]) if len(rows) else np.zeros((0, q, q))


def detect(
    img,
    mode: Mode | str = Mode.ST,
    n: int = 1024,
    detector: DetectorConfig = DetectorConfig(),
    cfg: StabilityConfig = StabilityConfig(),
    model=None,
    seed: int | None = None,
    predict: Callable | None = None,
) -> list[Keypoint]:
    """Detect up to ``n`` keypoints ranked according to ``mode``.

    Neural modes need ``model`` (regressor parameters); ``predict`` overrides the
    forward pass and is mainly a test hook.
    """
    mode = Mode(mode)
    if mode.neural and model is None and predict is None:
        raise ConfigurationError(f"mode {mode.value} requires a trained model")
    img = check_image(img, min_size=3)
    s_map, mask, rows, cols = _extrema(img, detector)
    s = s_map[rows, cols]
    flat = rows * img.shape[1] + cols

    if mode is Mode.ST:
        order = _rank(s, s, flat)[:n]
        return [_refined(s_map, rows[i], cols[i], s[i]) for i in order]

    keep = s > cfg.t_shi
    rows, cols, s, flat = rows[keep], cols[keep], s[keep], flat[keep]
    r = None
    if mode is Mode.SS_ST:
        lam, r = score_locations(img, rows, cols, detector, cfg, seed)
        primary = np.exp(-lam)
    elif mode is Mode.RS_ST:
        lam, r = score_locations(img, rows, cols, detector, cfg, seed)
        primary = r
    else:
        if predict is None:
            from .nessnet import forward

            def predict(p):
                return forward(model, p)

        pred = np.asarray(predict(net_patches(img, rows, cols)), dtype=np.float64).reshape(-1)
        if mode is Mode.NESS_ST:
            lam = pred
            sub = np.zeros(mask.shape, dtype=bool)
            sub[rows, cols] = True
            final = combine_scores(sub, lam)
            primary = final[rows, cols]
        else:
            lam = np.zeros_like(pred)
            r = pred
            primary = pred
    order = _rank(primary, s, flat)[:n]
    return [
        _refined(s_map, rows[i], cols[i], s[i], lam[i], None if r is None else r[i]) for i in order
    ]


def generate_ground_truth(
    img,
    detector: DetectorConfig = DetectorConfig(),
    n: int = 1024,
    cfg: StabilityConfig = StabilityConfig(),
    seed: int | None = None,
    predict: Callable | None = None,
) -> list[GroundTruthRecord]:
    """Select up to ``n`` extrema and attach their stability targets.

    Candidates are ranked by base score, or by ``exp(-predict(patch))`` when a
    trained-so-far predictor is supplied. Every selected point is kept; ``included``
    marks the ones above ``t_shi`` that take part in the loss.
    """
    img = check_image(img, min_size=3)
    s_map, _, rows, cols = _extrema(img, detector)
    if len(rows) == 0:
        return []
    s = s_map[rows, cols]
    flat = rows * img.shape[1] + cols
    primary = s if predict is None else np.exp(-np.asarray(predict(net_patches(img, rows, cols))).reshape(-1))
    order = _rank(primary, s, flat)[:n]
    rows, cols, s = rows[order], cols[order], s[order]
    lam, r = score_locations(img, rows, cols, detector, cfg, seed)
    out = []
    for i in range(len(rows)):
        kp = _refined(s_map, rows[i], cols[i], s[i], lam[i], r[i])
        out.append(GroundTruthRecord(kp, float(lam[i]), bool(s[i] > cfg.t_shi), int(rows[i]), int(cols[i])))
    return out


def _fmt(v) -> str:
    return "" if v is None else f"{v:.9g}"


KEYPOINT_HEADER = ["x", "y", "s", "lambda", "r"]


def keypoints_to_csv(kps: Sequence[Keypoint]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(KEYPOINT_HEADER)
    for k in kps:
        wr.writerow([_fmt(k.x), _fmt(k.y), _fmt(k.s), _fmt(k.lam), _fmt(k.r)])
    return buf.getvalue()


def keypoints_from_csv(text: str) -> list[Keypoint]:
    rd = csv.DictReader(io.StringIO(text))
    out = []
    for row in rd:
        r = row.get("r", "")
        out.append(Keypoint(float(row["x"]), float(row["y"]), float(row["s"]), float(row["lambda"]), float(r) if r else None))
    return out


GT_HEADER = ["image", "x", "y", "s", "lambda", "r", "included", "row", "col"]


def gt_rows(image_name: str, records: Sequence[GroundTruthRecord]) -> list[list[str]]:
    return [
        [image_name, _fmt(g.keypoint.x), _fmt(g.keypoint.y), _fmt(g.keypoint.s), _fmt(g.lambda_gt),
         _fmt(g.keypoint.r), "1" if g.included else "0", str(g.row), str(g.col)]
        for g in records
    ]
