"""Synthetic warp pairs and classical detector metrics: repeatability, matching, homography accuracy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import homsample
from .homsample import HomographySamplerConfig
from .imgcore import InvalidInput, bilinear_sample, check_image


class EstimationFailure(RuntimeError):
    pass


@dataclass
class WarpPair:
    img_a: np.ndarray
    img_b: np.ndarray
    h_ab: np.ndarray


@dataclass
class AccuracyCurve:
    thresholds: list
    accuracy: list
    maa: float
    error: float = float("nan")


@dataclass
class MatchSet:
    idx_a: np.ndarray
    idx_b: np.ndarray
    distance: np.ndarray

    def __len__(self):
        return len(self.idx_a)


def warp_image(img, h_ab, shape=None, fill: float = 0.0) -> np.ndarray:
    """Inverse-map every target pixel through ``h_ab^-1`` and sample bilinearly."""
    img = np.asarray(img, dtype=np.float64)
    hh, ww = img.shape if shape is None else shape
    ys, xs = np.mgrid[0:hh, 0:ww].astype(np.float64)
    src = homsample.apply(homsample.invert(h_ab), np.stack([xs, ys], axis=-1))
    sx, sy = src[..., 0], src[..., 1]
    h, w = img.shape
    inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    out = bilinear_sample(img, sx, sy)
    return np.where(inside, out, fill)


def image_sampler(img_shape, sampler: HomographySamplerConfig) -> HomographySamplerConfig:
    """Rescale a local sampler so its outer square spans the image."""
    side = float(min(img_shape))
    scale = side / sampler.outer
    return HomographySamplerConfig(d=sampler.d * scale, outer=side, jitter=sampler.jitter, seed=sampler.seed)


def synth_pair(img, sampler: HomographySamplerConfig, rng: np.random.Generator, h_ab=None) -> WarpPair:
    """Warp ``img`` by one global sampled homography (or the given ``h_ab``)."""
    img = check_image(img)
    h, w = img.shape
    if h < 64 or w < 64:
        raise InvalidInput(f"synthetic pairs need at least 64x64 images, got {w}x{h}")
    if h_ab is None:
        local = homsample.sample_homography(image_sampler(img.shape, sampler), rng)
        h_ab = homsample.centered(local, ((w - 1) / 2.0, (h - 1) / 2.0))
        if np.array_equal(local, np.eye(3)):
            h_ab = np.eye(3)
    h_ab = homsample.normalize(h_ab)
    return WarpPair(img, warp_image(img, h_ab), h_ab)


def _xy(kps):
    if len(kps) == 0:
        return np.zeros((0, 2))
    if isinstance(kps, np.ndarray):
        return kps.reshape(-1, 2).astype(np.float64)
    return np.array([[k.x, k.y] for k in kps], dtype=np.float64)


def _inside(pts, shape):
    h, w = shape
    return (pts[:, 0] >= 0) & (pts[:, 0] <= w - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= h - 1)


def _greedy(dist, thr):
    """One-to-one pairs by ascending distance, ties by (row, col); returns pair count."""
    if dist.size == 0:
        return 0
    ii, jj = np.nonzero(dist <= thr)
    order = np.lexsort((jj, ii, dist[ii, jj]))
    used_a, used_b = set(), set()
    for t in order:
        a, b = int(ii[t]), int(jj[t])
        if a in used_a or b in used_b:
            continue
        used_a.add(a)
        used_b.add(b)
    return len(used_a)


def repeatability(kps_a, kps_b, h_ab, thr: float, shape_b, shape_a=None) -> float:
    """Fraction of keypoints re-detected within ``thr`` pixels in the shared region.

    The pair distance averages the error measured in both frames, which makes the
    score symmetric under swapping the images and inverting ``h_ab``.
    """
    if not thr > 0:
        raise InvalidInput(f"threshold must be > 0, got {thr}")
    shape_a = shape_b if shape_a is None else shape_a
    h_ba = homsample.invert(h_ab)
    a = _xy(kps_a)
    b = _xy(kps_b)
    if len(a) == 0 or len(b) == 0:
        return 0.0
    a_in_b = homsample.apply(h_ab, a)
    b_in_a = homsample.apply(h_ba, b)
    va = _inside(a_in_b, shape_b)
    vb = _inside(b_in_a, shape_a)
    denom = min(int(va.sum()), int(vb.sum()))
    if denom == 0:
        return 0.0
    d_b = np.linalg.norm(a_in_b[va][:, None, :] - b[vb][None, :, :], axis=-1)
    d_a = np.linalg.norm(a[va][:, None, :] - b_in_a[vb][None, :, :], axis=-1)
    return _greedy(0.5 * (d_a + d_b), thr) / denom


def patch_descriptor(img, kp, side: int = 13) -> np.ndarray:
    """Mean-subtracted, L2-normalized ``side x side`` bilinear patch at the keypoint."""
    if side % 2 == 0:
        raise InvalidInput(f"descriptor side must be odd, got {side}")
    x, y = (kp.x, kp.y) if hasattr(kp, "x") else (float(kp[0]), float(kp[1]))
    grid = homsample.make_grid((x, y), side) if side >= 3 else np.array([[x, y]])
    v = np.asarray(bilinear_sample(img, grid[:, 0], grid[:, 1]), dtype=np.float64).ravel()
    v = v - v.mean()
    n = np.linalg.norm(v)
    return v / n if n > 1e-12 else np.zeros_like(v)


def describe(img, kps, side: int = 13) -> np.ndarray:
    if len(kps) == 0:
        return np.zeros((0, side * side))
    return np.stack([patch_descriptor(img, k, side) for k in kps])


def match_mutual_ratio(desc_a, desc_b, ratio: float = 0.9) -> MatchSet:
    """Mutual nearest neighbours that also pass the ratio test on side a."""
    if not 0 < ratio <= 1:
        raise InvalidInput(f"ratio must be in (0, 1], got {ratio}")
    da = np.asarray(desc_a, dtype=np.float64)
    db = np.asarray(desc_b, dtype=np.float64)
    empty = MatchSet(np.zeros(0, int), np.zeros(0, int), np.zeros(0))
    if len(da) == 0 or len(db) == 0:
        return empty
    sq = (da * da).sum(1)[:, None] + (db * db).sum(1)[None, :] - 2.0 * da @ db.T
    dist = np.sqrt(np.maximum(sq, 0.0))
    nn_ab = np.argmin(dist, axis=1)
    nn_ba = np.argmin(dist, axis=0)
    ia = np.arange(len(da))
    mutual = nn_ba[nn_ab] == ia
    d1 = dist[ia, nn_ab]
    if len(db) > 1:
        d2 = np.partition(dist, 1, axis=1)[:, 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(d2 > 0, d1 / np.where(d2 > 0, d2, 1.0), 1.0)
        passed = q < ratio
    else:
        passed = np.ones(len(da), dtype=bool)
    keep = mutual & passed
    return MatchSet(ia[keep], nn_ab[keep], d1[keep])


def transfer_error(h, src, dst) -> np.ndarray:
    """Symmetric transfer error ``sqrt((|H x - x'|^2 + |H^-1 x' - x|^2) / 2)`` per pair."""
    return _sym_err(np.asarray(h)[None], src, dst)[0]


def _sym_err(hs, src, dst):
    # hs: (B, 3, 3) -> (B, N)
    b = len(hs)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        hinv = np.linalg.inv(hs)
        fwd = _apply_many(hs, src)
        bwd = _apply_many(hinv, dst)
        e = np.sqrt(0.5 * (((fwd - dst[None]) ** 2).sum(-1) + ((bwd - src[None]) ** 2).sum(-1)))
    return np.where(np.isfinite(e), e, np.inf).reshape(b, -1)


def _apply_many(hs, pts):
    x, y = pts[:, 0][None], pts[:, 1][None]
    den = hs[:, 2, 0, None] * x + hs[:, 2, 1, None] * y + hs[:, 2, 2, None]
    den = np.where(np.abs(den) < 1e-12, np.nan, den)
    u = (hs[:, 0, 0, None] * x + hs[:, 0, 1, None] * y + hs[:, 0, 2, None]) / den
    v = (hs[:, 1, 0, None] * x + hs[:, 1, 1, None] * y + hs[:, 1, 2, None]) / den
    return np.stack([u, v], axis=-1)


def _collinear(p, tol):
    # p: (B, 4, 2); True if any three points are (nearly) collinear
    bad = np.zeros(len(p), dtype=bool)
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        a, b, c = p[:, i], p[:, j], p[:, k]
        area = np.abs((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
        bad |= area < tol
    return bad


def required_iterations(inlier_ratio: float, conf: float, sample_size: int = 4) -> float:
    w = inlier_ratio**sample_size
    if w <= 0:
        return math.inf
    if w >= 1:
        return 0.0
    return math.log(1.0 - conf) / math.log(1.0 - w)


def estimate_homography_ransac(src, dst, iters: int = 10000, inlier_thr: float = 3.0, conf: float = 0.9999,
                               rng: np.random.Generator | None = None, chunk: int = 256):
    """Robust homography from point correspondences.

    Hypotheses come from random non-degenerate 4-point samples, evaluated ``chunk`` at a
    time; the loop stops once the adaptive iteration bound for ``conf`` is met. The best
    model is refit on all its inliers. Returns ``(H, inlier_mask)``.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < 4 or len(dst) != n:
        raise EstimationFailure(f"need at least 4 correspondences, got {n}")
    rng = np.random.default_rng(0) if rng is None else rng
    scale = max(np.ptp(src, axis=0).max(initial=0), np.ptp(dst, axis=0).max(initial=0), 1.0)
    tol = 1e-6 * scale * scale
    best_count, best_h = 0, None
    done, bound = 0, float(iters)
    while done < min(iters, bound):
        b = int(min(chunk, iters - done))
        idx = np.argsort(rng.random((b, n)), axis=1)[:, :4]
        done += b
        ps, pd = src[idx], dst[idx]
        ok = ~(_collinear(ps, tol) | _collinear(pd, tol))
        if not ok.any():
            continue
        with np.errstate(all="ignore"):
            try:
                hs = homsample.dlt(ps[ok], pd[ok])
            except (np.linalg.LinAlgError, ValueError):
                continue
        finite = np.all(np.isfinite(hs), axis=(1, 2))
        hs = hs[finite]
        if len(hs) == 0:
            continue
        counts = (_sym_err(hs, src, dst) < inlier_thr).sum(axis=1)
        j = int(np.argmax(counts))
        if counts[j] > best_count:
            best_count, best_h = int(counts[j]), hs[j]
            bound = required_iterations(best_count / n, conf)
    if best_h is None or best_count < 4:
        raise EstimationFailure("no model supported by at least 4 inliers")
    mask = transfer_error(best_h, src, dst) < inlier_thr
    h = best_h
    try:
        refit = homsample.dlt(src[mask], dst[mask])
        refit_mask = transfer_error(refit, src, dst) < inlier_thr
        if refit_mask.sum() >= mask.sum():
            h, mask = refit, refit_mask
    except (np.linalg.LinAlgError, ValueError):
        pass
    return h, mask


def image_corners(shape) -> np.ndarray:
    h, w = shape
    return np.array([[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]])


def corner_error(h_est, h_gt, corners) -> float:
    if h_est is None:
        return math.inf
    try:
        e = homsample.apply(h_est, corners) - homsample.apply(h_gt, corners)
    except (homsample.PointAtInfinity, FloatingPointError):
        return math.inf
    err = float(np.linalg.norm(e, axis=-1).mean())
    return err if math.isfinite(err) else math.inf


def curve_from_errors(errors, thresholds) -> AccuracyCurve:
    """Mean accuracy per threshold over a set of per-pair corner errors."""
    thresholds = [float(t) for t in thresholds]
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise InvalidInput("thresholds must be sorted ascending")
    e = np.asarray(errors, dtype=np.float64).reshape(-1)
    acc = [float(np.mean(e <= t)) if e.size else 0.0 for t in thresholds]
    maa = float(np.mean(acc)) if acc else 0.0
    return AccuracyCurve(thresholds, acc, maa, float(np.mean(e)) if e.size else float("nan"))


def homography_accuracy(h_est, h_gt, image_corners_xy, thresholds) -> AccuracyCurve:
    return curve_from_errors([corner_error(h_est, h_gt, np.asarray(image_corners_xy, dtype=np.float64))], thresholds)


@dataclass
class EvalSettings:
    jitter: float = 0.08
    d: float = 2.0
    pairs_per_image: int = 1
    ratio: float = 0.95
    inlier_thr: float = 2.0
    ransac_iters: int = 10000
    confidence: float = 0.9999
    descriptor_side: int = 13
    thresholds: list = field(default_factory=lambda: [1.0, 2.0, 3.0, 4.0, 5.0])
    repeat_thresholds: list = field(default_factory=lambda: [1.0, 3.0, 5.0])

    def sampler(self) -> HomographySamplerConfig:
        return HomographySamplerConfig(d=self.d, outer=10.0, jitter=self.jitter)


def evaluate_pair(pair: WarpPair, detect_fn, settings: EvalSettings, rng: np.random.Generator, pair_id: str = "") -> dict:
    """Run ``detect_fn`` on both images and collect repeatability and homography metrics."""
    kps_a = detect_fn(pair.img_a)
    kps_b = detect_fn(pair.img_b)
    rec = {"pair_id": pair_id, "n_kp_a": len(kps_a), "n_kp_b": len(kps_b)}
    for t in settings.repeat_thresholds:
        rec[f"repeatability@{t:g}px"] = repeatability(kps_a, kps_b, pair.h_ab, t, pair.img_b.shape, pair.img_a.shape)
    da = describe(pair.img_a, kps_a, settings.descriptor_side)
    db = describe(pair.img_b, kps_b, settings.descriptor_side)
    ms = match_mutual_ratio(da, db, settings.ratio)
    rec["matched_count"] = len(ms)
    h_est, inliers = None, 0
    if len(ms) >= 4:
        src = _xy(kps_a)[ms.idx_a]
        dst = _xy(kps_b)[ms.idx_b]
        try:
            h_est, mask = estimate_homography_ransac(src, dst, settings.ransac_iters, settings.inlier_thr,
                                                     settings.confidence, rng)
            inliers = int(mask.sum())
        except EstimationFailure:
            h_est = None
    rec["inlier_count"] = inliers
    err = corner_error(h_est, pair.h_ab, image_corners(pair.img_a.shape))
    rec["corner_error_px"] = err if math.isfinite(err) else None
    return rec


def aggregate(records, settings: EvalSettings) -> dict:
    errs = [math.inf if r["corner_error_px"] is None else r["corner_error_px"] for r in records]
    curve = curve_from_errors(errs, settings.thresholds)
    rep = {}
    for t in settings.repeat_thresholds:
        key = f"repeatability@{t:g}px"
        vals = [r[key] for r in records]
        rep[key] = float(np.mean(vals)) if vals else 0.0
    return {
        "pairs": len(records),
        "mean_repeatability": rep,
        "accuracy_curve": {"thresholds": curve.thresholds, "accuracy": curve.accuracy},
        "mAA": curve.maa,
    }
