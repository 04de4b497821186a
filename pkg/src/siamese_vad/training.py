"""Patch preprocessing, pair augmentation and the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .roc import partial_auc
from .siamese import AdamState, Architecture, SiameseModel, backward_and_step, forward, init_model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_iterations: int = 500
    gamma: float = 0.2
    label_smoothing: float = 0.1
    validation_fraction: float = 0.1
    validate_every: int = 10
    fpr_cap: float = 0.3
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise InvalidInputError("gamma must lie in (0, 1]")
        if not 0 <= self.label_smoothing < 0.5:
            raise InvalidInputError("label_smoothing must lie in [0, 0.5)")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be at least 1")


def preprocess(raw, flow_scale: float = 8.0) -> np.ndarray:
    """Map raw patches (..., H, W, 13) to [-1, 1].

    Intensities go linearly from [0, 255]; motion planes are divided by
    ``flow_scale`` and clamped to [0, 1] before the same affine map.
    """
    raw = np.asarray(raw, dtype=np.float32)
    out = np.empty_like(raw)
    out[..., 0] = raw[..., 0] / np.float32(127.5) - 1
    out[..., 1:] = np.clip(raw[..., 1:] / np.float32(flow_scale), 0, 1) * 2 - 1
    return out


def resample(x, scale: float = 1.0, shift=(0.0, 0.0)) -> np.ndarray:
    """Bilinear central zoom by 1/scale plus a (dy, dx) shift, edges clamped."""
    h, w = x.shape[-3], x.shape[-2]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    ys = np.clip(cy + (np.arange(h) - cy) * scale + shift[0], 0, h - 1)
    xs = np.clip(cx + (np.arange(w) - cx) * scale + shift[1], 0, w - 1)
    y0 = np.minimum(np.floor(ys).astype(int), h - 2)
    x0 = np.minimum(np.floor(xs).astype(int), w - 2)
    wy = (ys - y0).astype(x.dtype)[:, None, None]
    wx = (xs - x0).astype(x.dtype)[None, :, None]
    rows0 = x[..., y0, :, :]
    rows1 = x[..., y0 + 1, :, :]
    top = rows0[..., x0, :] * (1 - wx) + rows0[..., x0 + 1, :] * wx
    bot = rows1[..., x0, :] * (1 - wx) + rows1[..., x0 + 1, :] * wx
    return top * (1 - wy) + bot * wy


def augment_pair(x1, x2, rng, scale_range=(0.7, 1.0), brightness=0.2):
    """One random flip / central scale / brightness draw, shared by both patches."""
    flip = rng.random() < 0.5
    s = rng.uniform(*scale_range)
    delta = np.float32(rng.uniform(-brightness, brightness))
    out = []
    for x in (x1, x2):
        if flip:
            x = x[:, ::-1, :]
        x = resample(x, s)
        x[..., 0] = np.clip(x[..., 0] + delta, -1, 1)
        out.append(x.astype(np.float32))
    return out


def preprocess_patch(raw, augment: bool = False, rng=None, flow_scale: float = 8.0) -> np.ndarray:
    x = preprocess(raw, flow_scale)
    if augment:
        x, _ = augment_pair(x, x, rng)
    return x


@dataclass
class TrainResult:
    model: SiameseModel
    history: list = field(default_factory=list)  # (step, loss, val_partial_auc or nan)
    best_step: int = 0


def stratified_split(y, fraction, rng):
    y = np.asarray(y)
    val = []
    for cls in (0, 1):
        idx = np.nonzero(y == cls)[0]
        idx = idx[rng.permutation(idx.size)]
        val.extend(idx[:int(round(fraction * idx.size))].tolist())
    val = np.array(sorted(val), dtype=int)
    train = np.setdiff1d(np.arange(y.size), val)
    return train, val


def validation_scores(model: SiameseModel, x1, x2, batch: int = 256) -> np.ndarray:
    return np.concatenate([forward(model, x1[i:i + batch], x2[i:i + batch], "eval").p
                           for i in range(0, len(x1), batch)])


def train(x1, x2, y, cfg: TrainConfig = TrainConfig(), arch: Architecture = Architecture(),
          progress=None) -> TrainResult:
    """Adam on minibatches; keep the snapshot with the best validation partial AUC.

    ``x1``/``x2`` hold preprocessed patches; ``y`` is 1 for dissimilar pairs.
    """
    y = np.asarray(y).astype(np.int64)
    if set(np.unique(y).tolist()) != {0, 1}:
        raise InvalidInputError("training pairs need both similar and dissimilar examples")
    rng = np.random.default_rng(cfg.seed)
    tr, va = stratified_split(y, cfg.validation_fraction, rng)
    if tr.size < 2 * cfg.batch_size:
        raise InvalidInputError(f"{tr.size} training pairs after the split; need at least {2 * cfg.batch_size}")
    if len(set(y[va].tolist())) < 2:
        raise InvalidInputError("validation split lacks one of the classes")
    model = init_model(arch, seed=int(rng.integers(2**31)))
    opt = AdamState(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    vx1, vx2, vy = x1[va], x2[va], y[va]

    result = TrainResult(model.copy())
    best = -np.inf

    def validate(step, last_loss):
        nonlocal best
        score = partial_auc(validation_scores(model, vx1, vx2), vy, cfg.fpr_cap)
        result.history.append((step, last_loss, score))
        if score > best:
            best = score
            snap = model.copy()
            snap.iterations, snap.best_partial_auc = step, float(score)
            result.model, result.best_step = snap, step
        if progress:
            progress(step, last_loss, score)

    validate(0, float("nan"))
    order = tr[rng.permutation(tr.size)]
    pos = 0
    for step in range(1, cfg.max_iterations + 1):
        if pos + cfg.batch_size > order.size:
            order = tr[rng.permutation(tr.size)]
            pos = 0
        idx = np.sort(order[pos:pos + cfg.batch_size])
        pos += cfg.batch_size
        b1, b2 = x1[idx], x2[idx]
        if cfg.augment:
            b1, b2 = b1.copy(), b2.copy()
            for i in range(len(idx)):
                b1[i], b2[i] = augment_pair(b1[i], b2[i], rng)
        value = backward_and_step(model, b1, b2, y[idx], opt, cfg.gamma, cfg.label_smoothing, rng)
        if step % cfg.validate_every == 0 or step == cfg.max_iterations:
            validate(step, value)
        else:
            result.history.append((step, value, float("nan")))
    return result
