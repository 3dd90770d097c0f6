"""Small patch regressor for the neural stability score.

Architecture on a 17x17 patch (mean-subtracted)::

    conv3x3(8) -> ReLU -> maxpool2 -> conv3x3(16) -> ReLU -> maxpool2
    -> dense(32) -> ReLU -> dense(1) -> softplus

Forward and backward passes are written out by hand in numpy, batched over patches.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .imgcore import InvalidInput

PATCH = 17
ARCH = "patchcnn-17x17-c8-c16-d32-d1-softplus"
FORMAT = "nessst-regressor"
FORMAT_VERSION = 1

SHAPES = {
    "conv1_w": (8, 1, 3, 3),
    "conv1_b": (8,),
    "conv2_w": (16, 8, 3, 3),
    "conv2_b": (16,),
    "dense1_w": (64, 32),
    "dense1_b": (32,),
    "dense2_w": (32, 1),
    "dense2_b": (1,),
}
PARAM_ORDER = tuple(SHAPES)
FAN_IN = {"conv1_w": 9, "conv2_w": 72, "dense1_w": 64, "dense2_w": 32}

RegressorParams = dict  # name -> np.ndarray, keys in PARAM_ORDER


class TrainingDegenerate(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 200
    t_shi: float = 0.005
    seed: int = 0
    # regenerate targets every k epochs from the images (0 keeps them fixed)
    regen_every: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise InvalidInput(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise InvalidInput("Adam betas must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise InvalidInput("batch_size must be >= 1 and epochs >= 0")


@dataclass
class TrainSample:
    patch: np.ndarray
    s: float
    lambda_gt: float


def init_params(seed: int = 0) -> RegressorParams:
    """He-style uniform fan-in initialization; biases start at zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name in PARAM_ORDER:
        shape = SHAPES[name]
        if name in FAN_IN:
            bound = np.sqrt(6.0 / FAN_IN[name])
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def zero_params() -> RegressorParams:
    return {k: np.zeros(v) for k, v in SHAPES.items()}


def num_params() -> int:
    return int(sum(np.prod(s) for s in SHAPES.values()))


# ---- layers ---------------------------------------------------------------


def _im2col(x):
    # x: (N, C, H, W) -> (N, H-2, W-2, C*9) for a 3x3 valid convolution
    n, c, h, w = x.shape
    cols = np.empty((n, h - 2, w - 2, c, 3, 3))
    for i in range(3):
        for j in range(3):
            cols[..., i, j] = x[:, :, i : i + h - 2, j : j + w - 2].transpose(0, 2, 3, 1)
    return cols.reshape(n, h - 2, w - 2, c * 9)


def _col2im(dcols, shape):
    n, c, h, w = shape
    d = dcols.reshape(n, h - 2, w - 2, c, 3, 3)
    dx = np.zeros(shape)
    for i in range(3):
        for j in range(3):
            dx[:, :, i : i + h - 2, j : j + w - 2] += d[..., i, j].transpose(0, 3, 1, 2)
    return dx


def _conv(x, w, b):
    cols = _im2col(x)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.transpose(0, 3, 1, 2), cols


def _conv_back(dout, cols, w, xshape):
    # dout: (N, F, H', W')
    d = dout.transpose(0, 2, 3, 1)
    f = w.shape[0]
    dw = (d.reshape(-1, f).T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
    db = d.sum(axis=(0, 1, 2))
    dcols = d @ w.reshape(f, -1)
    return _col2im(dcols, xshape), dw, db


def _pool(x):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    v = x[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = np.argmax(v, axis=-1)
    return np.take_along_axis(v, idx[..., None], axis=-1)[..., 0], idx


def _pool_back(dout, idx, xshape):
    n, c, h, w = xshape
    h2, w2 = dout.shape[2:]
    v = np.zeros((n, c, h2, w2, 4))
    np.put_along_axis(v, idx[..., None], dout[..., None], axis=-1)
    v = v.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    dx = np.zeros(xshape)
    dx[:, :, : 2 * h2, : 2 * w2] = v
    return dx


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def _prep(patches):
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[-2:] != (PATCH, PATCH) or x.ndim != 3:
        raise InvalidInput(f"expected {PATCH}x{PATCH} patches, got shape {x.shape}")
    x = x - x.mean(axis=(1, 2), keepdims=True)
    return x[:, None, :, :]


def _forward(params, patches):
    x = _prep(patches)
    z1, cols1 = _conv(x, params["conv1_w"], params["conv1_b"])
    a1 = np.maximum(z1, 0.0)
    p1, i1 = _pool(a1)
    z2, cols2 = _conv(p1, params["conv2_w"], params["conv2_b"])
    a2 = np.maximum(z2, 0.0)
    p2, i2 = _pool(a2)
    f = p2.reshape(len(x), -1)
    z3 = f @ params["dense1_w"] + params["dense1_b"]
    a3 = np.maximum(z3, 0.0)
    z4 = (a3 @ params["dense2_w"] + params["dense2_b"])[:, 0]
    out = np.logaddexp(0.0, z4)
    cache = (x, z1, cols1, a1, i1, p1, z2, cols2, a2, i2, p2, f, z3, a3, z4)
    return out, cache


def forward(params: RegressorParams, patches) -> np.ndarray:
    """Predicted stability for one ``17x17`` patch or a stack ``(N, 17, 17)``; always ``>= 0``."""
    if np.ndim(patches) == 3 and len(patches) == 0:
        return np.zeros(0)
    out, _ = _forward(params, patches)
    return out


def _mask(s, t_shi):
    return (np.asarray(s, dtype=np.float64) > t_shi).astype(np.float64)


def loss(lambda_hat, lambda_gt, s, t_shi: float) -> float:
    """Half mean squared error over samples whose base score exceeds ``t_shi``.

    Returns 0 when no sample passes the filter.
    """
    lh = np.asarray(lambda_hat, dtype=np.float64)
    lg = np.asarray(lambda_gt, dtype=np.float64)
    ss = np.asarray(s, dtype=np.float64)
    if not (lh.shape == lg.shape == ss.shape):
        raise InvalidInput(f"batch shape mismatch: {lh.shape}, {lg.shape}, {ss.shape}")
    ind = _mask(ss, t_shi)
    count = ind.sum()
    if count == 0:
        return 0.0
    return float(0.5 * np.sum((lh - lg) ** 2 * ind) / count)


def _stack(batch):
    patches = np.stack([b.patch for b in batch])
    s = np.array([b.s for b in batch], dtype=np.float64)
    lg = np.array([b.lambda_gt for b in batch], dtype=np.float64)
    return patches, s, lg


def loss_and_grad(params: RegressorParams, batch, t_shi: float):
    """Loss and exact reverse-mode gradient for a batch of ``TrainSample``."""
    if len(batch) == 0:
        raise InvalidInput("empty batch")
    patches, s, lg = _stack(batch)
    out, cache = _forward(params, patches)
    x, z1, cols1, a1, i1, p1, z2, cols2, a2, i2, p2, f, z3, a3, z4 = cache
    ind = _mask(s, t_shi)
    count = ind.sum()
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    if count == 0:
        return 0.0, grads
    value = float(0.5 * np.sum((out - lg) ** 2 * ind) / count)

    dout = (out - lg) * ind / count
    dz4 = dout * _sigmoid(z4)
    grads["dense2_w"] = a3.T @ dz4[:, None]
    grads["dense2_b"] = np.array([dz4.sum()])
    da3 = dz4[:, None] @ params["dense2_w"].T
    dz3 = da3 * (z3 > 0)
    grads["dense1_w"] = f.T @ dz3
    grads["dense1_b"] = dz3.sum(axis=0)
    df = dz3 @ params["dense1_w"].T
    dp2 = df.reshape(p2.shape)
    da2 = _pool_back(dp2, i2, a2.shape)
    dz2 = da2 * (z2 > 0)
    dp1, grads["conv2_w"], grads["conv2_b"] = _conv_back(dz2, cols2, params["conv2_w"], p1.shape)
    da1 = _pool_back(dp1, i1, a1.shape)
    dz1 = da1 * (z1 > 0)
    _, grads["conv1_w"], grads["conv1_b"] = _conv_back(dz1, cols1, params["conv1_w"], x.shape)
    return value, grads


def backward(params: RegressorParams, batch, t_shi: float) -> RegressorParams:
    return loss_and_grad(params, batch, t_shi)[1]


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params, grads, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    t = state.t + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    new_p, new_m, new_v = {}, {}, {}
    for k in params:
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        new_p[k] = params[k] - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


def dataset_loss(params, dataset, t_shi: float) -> float:
    patches, s, lg = _stack(dataset)
    return loss(forward(params, patches), lg, s, t_shi)


def train(dataset, cfg: TrainConfig, init: RegressorParams | None = None, regenerate=None):
    """Mini-batch Adam on the masked regression loss.

    ``regenerate(epoch, params)``, when given and ``cfg.regen_every > 0``, returns a
    fresh dataset every ``regen_every`` epochs (online target generation). Returns ``(params, loss_trace)`` where
    ``loss_trace[0]`` is the loss before training and ``loss_trace[e]`` after epoch ``e``.
    """
    dataset = list(dataset)
    if not dataset:
        raise TrainingDegenerate("empty dataset")
    if not any(b.s > cfg.t_shi for b in dataset):
        raise TrainingDegenerate(f"no sample has s > t_shi={cfg.t_shi}")
    params = init_params(cfg.seed) if init is None else {k: v.copy() for k, v in init.items()}
    state = AdamState.zeros(params)
    rng = np.random.default_rng(cfg.seed)
    trace = [dataset_loss(params, dataset, cfg.t_shi)]
    for epoch in range(1, cfg.epochs + 1):
        if regenerate is not None and epoch > 1 and cfg.regen_every > 0 and (epoch - 1) % cfg.regen_every == 0:
            dataset = list(regenerate(epoch, params)) or dataset
        order = rng.permutation(len(dataset))
        for lo in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[lo : lo + cfg.batch_size]]
            if not any(b.s > cfg.t_shi for b in batch):
                continue
            _, grads = loss_and_grad(params, batch, cfg.t_shi)
            params, state = adam_step(params, grads, state, cfg)
        trace.append(dataset_loss(params, dataset, cfg.t_shi))
    return params, trace


# ---- model file -----------------------------------------------------------


def model_to_json(params: RegressorParams, cfg: TrainConfig | None = None, target: str = "lambda") -> str:
    doc = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "architecture": ARCH,
        "target": target,
        "param_order": list(PARAM_ORDER),
        "params": {k: {"shape": list(SHAPES[k]), "data": [float(v) for v in np.asarray(params[k]).ravel()]} for k in PARAM_ORDER},
        "train_config": asdict(cfg) if cfg is not None else None,
    }
    return json.dumps(doc, indent=1, sort_keys=False) + "\n"


def model_from_json(text: str):
    """Parse a model file; returns ``(params, target, train_config_dict)``."""
    doc = json.loads(text)
    if doc.get("format") != FORMAT or doc.get("version") != FORMAT_VERSION:
        raise InvalidInput("not a regressor model file of a supported version")
    if doc.get("architecture") != ARCH:
        raise InvalidInput(f"unsupported architecture {doc.get('architecture')!r}")
    params = {}
    for k in PARAM_ORDER:
        entry = doc["params"][k]
        arr = np.asarray(entry["data"], dtype=np.float64)
        if tuple(entry["shape"]) != SHAPES[k] or arr.size != int(np.prod(SHAPES[k])):
            raise InvalidInput(f"parameter {k} has wrong shape")
        params[k] = arr.reshape(SHAPES[k])
    return params, doc.get("target", "lambda"), doc.get("train_config")


# ---- finite-difference verification ----------------------------------------


def _loss_and_pattern(params, patches, s, lg, t_shi):
    out, cache = _forward(params, patches)
    z1, i1, z2, i2, z3 = cache[1], cache[4], cache[6], cache[9], cache[12]
    pattern = b"".join(a.tobytes() for a in (z1 > 0, i1, z2 > 0, i2, z3 > 0))
    return loss(out, lg, s, t_shi), pattern


def gradient_check(params, batch, t_shi: float, step: float = 1e-4, min_step: float = 1e-7):
    """Compare ``backward`` with central differences on every parameter.

    ReLU and max-pool make the loss piecewise smooth. When the ``+step``/``-step``
    evaluations fall on different linear pieces the difference quotient is
    meaningless, so the step is divided by 10 until both sides agree on the
    activation pattern (down to ``min_step``).

    Returns ``(max_rel_error, n_shrunk)`` with relative error
    ``|a - n| / max(|a| + |n|, 1e-8)``.
    """
    _, grads = loss_and_grad(params, batch, t_shi)
    patches, s, lg = _stack(batch)
    work = {k: v.copy() for k, v in params.items()}
    worst, shrunk = 0.0, 0
    for k in PARAM_ORDER:
        flat = work[k].reshape(-1)
        gflat = grads[k].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            h = step
            while True:
                flat[i] = old + h
                lp, pp = _loss_and_pattern(work, patches, s, lg, t_shi)
                flat[i] = old - h
                lm, pm = _loss_and_pattern(work, patches, s, lg, t_shi)
                flat[i] = old
                if pp == pm or h / 10 < min_step:
                    break
                h /= 10
            if h != step:
                shrunk += 1
            num = (lp - lm) / (2 * h)
            rel = abs(gflat[i] - num) / max(abs(gflat[i]) + abs(num), 1e-8)
            worst = max(worst, rel)
    return worst, shrunk
