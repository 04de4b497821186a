"""Siamese patch-distance network: numpy forward/backward, Adam, model files.

Tensors are NHWC. A tail is five 3x3 same-padded convolutions, each followed
by ReLU and batch normalization, with 2x2 max pooling after the second and
fourth. The head subtracts the two flattened tail outputs and classifies the
difference with fc1 -> ReLU -> dropout -> fc2 -> softmax; class 1 means
"dissimilar" and its probability is the learned distance.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataFormatError, InvalidInputError, NumericFailureError
from .flow import N_CHANNELS
from .patches import PATCH_H, PATCH_W

MODEL_MAGIC = b"VADM1"
MODEL_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    in_channels: int = N_CHANNELS
    patch_h: int = PATCH_H
    patch_w: int = PATCH_W
    widths: tuple = (32, 32, 64, 64, 128)
    pool_after: tuple = (1, 3)
    fc_width: int = 512
    dropout: float = 0.3
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    flow_scale: float = 8.0  # px/frame mapped to the top of the [-1, 1] range

    @property
    def tail_shape(self) -> tuple[int, int, int]:
        h, w = self.patch_h, self.patch_w
        for _ in self.pool_after:
            h, w = h // 2, w // 2
        return h, w, self.widths[-1]

    @property
    def embedding_dim(self) -> int:
        h, w, c = self.tail_shape
        return h * w * c

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        cin = self.in_channels
        for i, cout in enumerate(self.widths, start=1):
            shapes[f"conv{i}.weight"] = (3, 3, cin, cout)
            shapes[f"conv{i}.bias"] = (cout,)
            shapes[f"bn{i}.gamma"] = (cout,)
            shapes[f"bn{i}.beta"] = (cout,)
            cin = cout
        shapes["fc1.weight"] = (self.embedding_dim, self.fc_width)
        shapes["fc1.bias"] = (self.fc_width,)
        shapes["fc2.weight"] = (self.fc_width, 2)
        shapes["fc2.bias"] = (2,)
        return shapes

    def buffer_shapes(self) -> dict[str, tuple]:
        out = {}
        for i, c in enumerate(self.widths, start=1):
            out[f"bn{i}.running_mean"] = (c,)
            out[f"bn{i}.running_var"] = (c,)
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("widths", "pool_after"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(eq=False)
class SiameseModel:
    arch: Architecture
    params: dict
    buffers: dict
    iterations: int = 0
    best_partial_auc: float = float("nan")

    @property
    def dtype(self):
        return self.params["fc1.weight"].dtype

    def astype(self, dtype) -> "SiameseModel":
        return SiameseModel(self.arch,
                            {k: v.astype(dtype) for k, v in self.params.items()},
                            {k: v.astype(dtype) for k, v in self.buffers.items()},
                            self.iterations, self.best_partial_auc)

    def copy(self) -> "SiameseModel":
        return self.astype(self.dtype)

    def fingerprint(self) -> bytes:
        return hashlib.sha256(model_to_bytes(self)).digest()

    def p0(self) -> float:
        """Distance the model assigns to any pair of identical patches."""
        zero = np.zeros((1, self.arch.embedding_dim))
        return float(head_forward(self.astype(np.float64).params, zero)[1][0])


def init_model(arch: Architecture = Architecture(), seed: int = 0, dtype=np.float32) -> SiameseModel:
    """Glorot-normal weights, zero biases, identity batch norm."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".weight"):
            if len(shape) == 4:
                rf = shape[0] * shape[1]
                fan_in, fan_out = rf * shape[2], rf * shape[3]
            else:
                fan_in, fan_out = shape
            params[name] = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape).astype(dtype)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype)
        else:
            params[name] = np.zeros(shape, dtype)
    buffers = {}
    for name, shape in arch.buffer_shapes().items():
        buffers[name] = (np.ones if name.endswith("var") else np.zeros)(shape, dtype)
    return SiameseModel(arch, params, buffers)


# ---------------------------------------------------------------- layers


def _check(x, layer):
    if not np.all(np.isfinite(x)):
        raise NumericFailureError("non-finite activation", layer=layer)


def _im2col(x):
    """(n, h, w, c) -> (n*h*w, 9*c) patches of the zero-padded input, ordered (dy, dx, c)."""
    n, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    v = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))  # n, h, w, c, 3, 3
    return np.ascontiguousarray(v.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * wd, 9 * c)


def conv_forward(x, w, b):
    n, h, wd, _ = x.shape
    cols = _im2col(x)
    out = cols @ w.reshape(cols.shape[1], -1) + b
    return out.reshape(n, h, wd, -1), cols


def _conv_input_grad(dout, w, x_shape):
    # same-padded correlation of dout with the flipped, transposed kernel
    cout, cin = w.shape[3], w.shape[2]
    wf = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2)).reshape(9 * cout, cin)
    return (_im2col(dout) @ wf).reshape(x_shape[:3] + (cin,))


def conv_backward(dout, cols, x_shape, w, need_dx=True):
    cout = w.shape[-1]
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    return (_conv_input_grad(dout, w, x_shape) if need_dx else None), dw, db


def pool_forward(x):
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0], idx


def pool_backward(dout, idx, x_shape):
    n, h, w, c = x_shape
    onehot = (idx[..., None] == np.arange(4)) * dout[..., None]
    return onehot.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)


def bn_normalize(x, rmean, rvar, train, eps):
    if train:
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
    else:
        mean, var = rmean, rvar
    inv = 1.0 / np.sqrt(var + eps)
    return (x - mean) * inv, inv, mean, var


def bn_input_grad(dxhat, xhat, inv):
    m = xhat.shape[0] * xhat.shape[1] * xhat.shape[2]
    return (inv / m) * (m * dxhat - dxhat.sum(axis=(0, 1, 2)) - xhat * (dxhat * xhat).sum(axis=(0, 1, 2)))


def _halves(n1, *arrays):
    return [(a[:n1], a[n1:]) for a in arrays]


def tail_forward(params, buffers, arch: Architecture, x, train: bool, params2=None, n1=None):
    """Run the tail over a batch; returns ``(embedding (N, D), cache, batch_stats)``.

    When the batch stacks both sides of a pair set (first ``n1`` rows are the
    left patches), batch normalization in train mode uses one set of
    statistics for all rows, so the two tails see identical normalization and
    a pair of identical patches yields a zero difference in either mode.
    ``params2``, if given, holds separate weights for rows ``n1:`` (untied
    gradient checks); statistics stay shared.
    """
    untied = params2 is not None and params2 is not params
    n1 = x.shape[0] if n1 is None else n1
    caches = []
    stats = {}
    for i in range(1, len(arch.widths) + 1):
        xin_shape = x.shape
        w, b = f"conv{i}.weight", f"conv{i}.bias"
        if untied:
            (za, ca), (zb, cb) = conv_forward(x[:n1], params[w], params[b]), conv_forward(x[n1:], params2[w], params2[b])
            z, cols = np.concatenate([za, zb]), np.concatenate([ca, cb])
        else:
            z, cols = conv_forward(x, params[w], params[b])
        _check(z, f"conv{i}")
        mask = z > 0
        a = z * mask
        xhat, inv, mean, var = bn_normalize(a, buffers[f"bn{i}.running_mean"], buffers[f"bn{i}.running_var"],
                                            train, arch.bn_eps)
        g, be = params[f"bn{i}.gamma"], params[f"bn{i}.beta"]
        if untied:
            y = np.concatenate([xhat[:n1] * g + be, xhat[n1:] * params2[f"bn{i}.gamma"] + params2[f"bn{i}.beta"]])
        else:
            y = xhat * g + be
        _check(y, f"bn{i}")
        if train:
            n = a.shape[0] * a.shape[1] * a.shape[2]
            stats[i] = (mean, var * n / max(n - 1, 1))
        pcache = None
        if i - 1 in arch.pool_after:
            pre_shape = y.shape
            y, idx = pool_forward(y)
            pcache = (idx, pre_shape)
        caches.append((xin_shape, cols, mask, (xhat, inv), pcache))
        x = y
    return x.reshape(x.shape[0], -1), (caches, x.shape, n1), stats


def tail_backward(params, arch: Architecture, demb, cache, params2=None):
    """Per-side parameter gradients ``(grads_rows_before_n1, grads_rows_after_n1)``.

    With tied weights the total gradient is their sum.
    """
    caches, out_shape, n1 = cache
    p2 = params if params2 is None else params2
    g1, g2 = {}, {}
    d = demb.reshape(out_shape)
    for i in range(len(arch.widths), 0, -1):
        xin_shape, cols, mask, (xhat, inv), pcache = caches[i - 1]
        if pcache is not None:
            d = pool_backward(d, *pcache)
        (d_a, d_b), (x_a, x_b) = _halves(n1, d, xhat)
        gname, bname = f"bn{i}.gamma", f"bn{i}.beta"
        g1[gname], g2[gname] = (d_a * x_a).sum(axis=(0, 1, 2)), (d_b * x_b).sum(axis=(0, 1, 2))
        g1[bname], g2[bname] = d_a.sum(axis=(0, 1, 2)), d_b.sum(axis=(0, 1, 2))
        dxhat = np.concatenate([d_a * params[gname], d_b * p2[gname]])
        d = bn_input_grad(dxhat, xhat, inv) * mask
        w = f"conv{i}.weight"
        rows = n1 * xin_shape[1] * xin_shape[2]
        cout = d.shape[-1]
        d2 = d.reshape(-1, cout)
        g1[w] = (cols[:rows].T @ d2[:rows]).reshape(params[w].shape)
        g2[w] = (cols[rows:].T @ d2[rows:]).reshape(params[w].shape)
        g1[f"conv{i}.bias"], g2[f"conv{i}.bias"] = d2[:rows].sum(axis=0), d2[rows:].sum(axis=0)
        if i > 1:
            if p2 is params:
                d = _conv_input_grad(d, params[w], xin_shape)
            else:
                d = np.concatenate([_conv_input_grad(d[:n1], params[w], (n1,) + xin_shape[1:]),
                                    _conv_input_grad(d[n1:], p2[w], (xin_shape[0] - n1,) + xin_shape[1:])])
    return g1, g2


def head_forward(params, diff, drop_mask=None):
    h = diff @ params["fc1.weight"] + params["fc1.bias"]
    _check(h, "fc1")
    relu = h > 0
    a = h * relu
    if drop_mask is not None:
        a = a * drop_mask
    logits = a @ params["fc2.weight"] + params["fc2.bias"]
    _check(logits, "fc2")
    p = dissimilar_prob(logits)
    return logits, p, (diff, relu, a, drop_mask)


def head_backward(params, dlogits, cache):
    diff, relu, a, drop_mask = cache
    grads = {"fc2.weight": a.T @ dlogits, "fc2.bias": dlogits.sum(axis=0)}
    da = dlogits @ params["fc2.weight"].T
    if drop_mask is not None:
        da = da * drop_mask
    dh = da * relu
    grads["fc1.weight"] = diff.T @ dh
    grads["fc1.bias"] = dh.sum(axis=0)
    return dh @ params["fc1.weight"].T, grads


def dissimilar_prob(logits):
    # two-class softmax: P(class 1) = sigmoid(z1 - z0), computed without overflow
    t = logits[:, 1] - logits[:, 0]
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- pair forward / loss


@dataclass
class ForwardResult:
    logits: np.ndarray
    p: np.ndarray
    cache: tuple = field(repr=False, default=None)
    stats: tuple = field(repr=False, default=None)


def forward(model: SiameseModel, x1, x2, mode: str = "eval", rng=None, tail_params=None) -> ForwardResult:
    """Run both tails and the head on a batch of preprocessed pairs.

    Both sides go through the tail as one stacked batch. In train mode batch
    normalization uses statistics of that whole stack, and fc1 activations are
    dropped out (when ``rng`` is given and dropout > 0).
    ``tail_params`` may supply a separate parameter dict for the second tail,
    which untied gradient checks rely on.
    """
    if mode not in ("train", "eval"):
        raise InvalidInputError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    arch = model.arch
    x1 = np.asarray(x1, dtype=model.dtype)
    x2 = np.asarray(x2, dtype=model.dtype)
    expect = (arch.patch_h, arch.patch_w, arch.in_channels)
    if x1.shape[1:] != expect or x2.shape != x1.shape:
        raise InvalidInputError(f"expected pairs of {expect} patches, got {x1.shape} and {x2.shape}")
    n1 = x1.shape[0]
    f, tc, stats = tail_forward(model.params, model.buffers, arch, np.concatenate([x1, x2]), train,
                                params2=tail_params, n1=n1)
    drop = None
    if train and rng is not None and arch.dropout > 0:
        keep = 1.0 - arch.dropout
        drop = (rng.random((n1, arch.fc_width)) < keep).astype(model.dtype) / keep
    logits, p, hc = head_forward(model.params, f[:n1] - f[n1:], drop)
    return ForwardResult(logits, p, (tc, hc, tail_params), stats)


def smoothed_targets(y, label_smoothing):
    y = np.asarray(y, dtype=np.float64)
    return y * (1 - label_smoothing) + (1 - y) * label_smoothing


def example_losses(p, y, gamma: float = 0.2, label_smoothing: float = 0.1):
    """Per-example class-weighted cross entropy on smoothed targets."""
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-12, 1 - 1e-12)
    ys = smoothed_targets(y, label_smoothing)
    return -gamma * ys * np.log(p) - (1 - ys) * np.log(1 - p)


def loss(p, y, gamma: float = 0.2, label_smoothing: float = 0.1) -> float:
    return float(np.mean(example_losses(p, y, gamma, label_smoothing)))


def loss_grad_logits(p, y, gamma, label_smoothing, dtype):
    """d(mean loss)/d(logits) for the two-logit softmax."""
    ys = smoothed_targets(y, label_smoothing)
    p = np.asarray(p, dtype=np.float64)
    g = (-gamma * ys * (1 - p) + (1 - ys) * p) / p.size
    return np.stack([-g, g], axis=1).astype(dtype)


def backward(model: SiameseModel, res: ForwardResult, y, gamma: float = 0.2, label_smoothing: float = 0.1):
    """Gradients of the mean batch loss.

    Returns ``(grads, (tail1_grads, tail2_grads))``; with tied weights the
    tail entries of ``grads`` are the sum of the two per-tail gradients.
    """
    tc, hc, p2 = res.cache
    dlogits = loss_grad_logits(res.p, y, gamma, label_smoothing, model.dtype)
    ddiff, grads = head_backward(model.params, dlogits, hc)
    g1, g2 = tail_backward(model.params, model.arch, np.concatenate([ddiff, -ddiff]), tc, p2)
    for k in g1:
        grads[k] = g1[k] + g2[k]
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericFailureError("non-finite gradient", layer=k.split(".")[0])
    return grads, (g1, g2)


def update_running_stats(model: SiameseModel, stats):
    m = model.arch.bn_momentum
    for i, (mean, var) in stats.items():
        rm = model.buffers[f"bn{i}.running_mean"]
        rv = model.buffers[f"bn{i}.running_var"]
        rm[...] = m * rm + (1 - m) * mean
        rv[...] = m * rv + (1 - m) * var


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            if self.lr:
                params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


def backward_and_step(model: SiameseModel, x1, x2, y, opt: AdamState, gamma=0.2, label_smoothing=0.1, rng=None):
    res = forward(model, x1, x2, "train", rng)
    value = loss(res.p, y, gamma, label_smoothing)
    grads, _ = backward(model, res, y, gamma, label_smoothing)
    opt.step(model.params, grads)
    update_running_stats(model, res.stats)
    return value


# ---------------------------------------------------------------- inference


def embed(model: SiameseModel, x, batch: int = 512) -> np.ndarray:
    """Eval-mode tail output, flattened (one row per patch)."""
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim == 3:
        x = x[None]
    out = [tail_forward(model.params, model.buffers, model.arch, x[i:i + batch], False)[0]
           for i in range(0, x.shape[0], batch)]
    return np.concatenate(out) if out else np.zeros((0, model.arch.embedding_dim), model.dtype)


def distance_from_embeddings(model: SiameseModel, f1, f2) -> np.ndarray:
    """Dissimilar-class probability for embedding pairs (broadcast over rows)."""
    f1 = np.asarray(f1, dtype=model.dtype)
    f2 = np.asarray(f2, dtype=model.dtype)
    d = model.arch.embedding_dim
    if f1.shape[-1] != d or f2.shape[-1] != d:
        raise InvalidInputError(f"embeddings must have length {d}")
    diff = np.atleast_2d(f1 - f2)
    p = head_forward(model.params, diff)[1]
    return p if (f1.ndim > 1 or f2.ndim > 1) else p[0]


def pair_distance(model: SiameseModel, x1, x2) -> np.ndarray:
    return forward(model, x1, x2, "eval").p


# ---------------------------------------------------------------- model file


def model_to_bytes(model: SiameseModel) -> bytes:
    buf = io.BytesIO()
    desc = json.dumps(asdict(model.arch), sort_keys=True).encode()
    buf.write(MODEL_MAGIC + struct.pack("<II", MODEL_VERSION, len(desc)) + desc)
    tensors = list(model.params.items()) + list(model.buffers.items())
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for _, arr in tensors:
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    buf.write(struct.pack("<dI", model.best_partial_auc, model.iterations))
    return buf.getvalue()


def model_from_bytes(data: bytes) -> SiameseModel:
    if data[:5] != MODEL_MAGIC:
        raise DataFormatError("not a VADM1 model file")
    try:
        version, dlen = struct.unpack_from("<II", data, 5)
        if version != MODEL_VERSION:
            raise DataFormatError(f"unsupported model version {version}")
        pos = 13
        arch = Architecture.from_dict(json.loads(data[pos:pos + dlen]))
        pos += dlen
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        layout = []
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + nl].decode()
            pos += 2 + nl
            (nd,) = struct.unpack_from("<B", data, pos)
            shape = struct.unpack_from(f"<{nd}I", data, pos + 1)
            pos += 1 + 4 * nd
            layout.append((name, tuple(shape)))
        expected = {**arch.param_shapes(), **arch.buffer_shapes()}
        if dict(layout) != expected or len(layout) != len(expected):
            raise DataFormatError("model tensors do not match the architecture descriptor")
        params, buffers = {}, {}
        for name, shape in layout:
            n = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * n
            (buffers if "running" in name else params)[name] = arr
        best, iters = struct.unpack_from("<dI", data, pos)
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"corrupt model file: {exc}") from None
    if pos + 12 != len(data):
        raise DataFormatError("trailing bytes in model file")
    return SiameseModel(arch, params, buffers, iters, best)


def save_model(model: SiameseModel, path) -> bytes:
    data = model_to_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).digest()


def load_model(path) -> SiameseModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
