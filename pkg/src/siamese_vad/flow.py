"""Dense optical flow and the 13-plane channel stack.

Flow is a coarse-to-fine Horn-Schunck solver with warping. Each pyramid
level linearizes the brightness constancy constraint around the flow
propagated from the level below and runs Jacobi iterations on the total
flow, so smoothness acts on the full field rather than the increment.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import DataFormatError, InvalidInputError, OutOfRangeError

TEMPORAL_DEPTH = 7
N_CHANNELS = 13
MOTION_PLANE_MODES = ("components", "spatial_gradients")

_HS_KERNEL = np.array([[1 / 12, 1 / 6, 1 / 12],
                       [1 / 6, 0.0, 1 / 6],
                       [1 / 12, 1 / 6, 1 / 12]])
_FLOW_MAGIC = b"FLOW1"


@dataclass(frozen=True)
class FlowParams:
    levels: int = 3
    smoothness: float = 15.0
    iterations: int = 100
    presmooth_sigma: float = 1.0
    motion_planes: str = "components"

    def __post_init__(self):
        if self.levels < 1 or self.iterations < 0 or self.smoothness <= 0:
            raise InvalidInputError(f"invalid flow parameters {self}")
        if self.motion_planes not in MOTION_PLANE_MODES:
            raise InvalidInputError(f"motion_planes must be one of {MOTION_PLANE_MODES}")


@dataclass(frozen=True, eq=False)
class FlowField:
    u: np.ndarray
    v: np.ndarray

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


def _downsample(img):
    blurred = ndimage.gaussian_filter(img, 1.0, mode="nearest")
    h, w = img.shape
    return ndimage.zoom(blurred, (((h + 1) // 2) / h, ((w + 1) // 2) / w), order=1, mode="nearest", grid_mode=True)


def _resize_flow(u, v, shape):
    h, w = u.shape
    zy, zx = shape[0] / h, shape[1] / w
    u2 = ndimage.zoom(u, (zy, zx), order=1, mode="nearest", grid_mode=True) * zx
    v2 = ndimage.zoom(v, (zy, zx), order=1, mode="nearest", grid_mode=True) * zy
    return u2, v2


def _warp(img, u, v):
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return ndimage.map_coordinates(img, [yy + v, xx + u], order=1, mode="nearest")


def _hs_level(a, b, u, v, params: FlowParams):
    bw = _warp(b, u, v)
    gy_a, gx_a = np.gradient(a)
    gy_b, gx_b = np.gradient(bw)
    ix = 0.5 * (gx_a + gx_b)
    iy = 0.5 * (gy_a + gy_b)
    it = bw - a
    denom = params.smoothness ** 2 + ix * ix + iy * iy
    u0, v0 = u, v
    # residual of the linearized constraint, up to the (u - u0, v - v0) terms
    base = it - ix * u0 - iy * v0
    for _ in range(params.iterations):
        ub = ndimage.convolve(u, _HS_KERNEL, mode="nearest")
        vb = ndimage.convolve(v, _HS_KERNEL, mode="nearest")
        r = (ix * ub + iy * vb + base) / denom
        u = ub - ix * r
        v = vb - iy * r
    return u, v


def estimate_flow(frame_a, frame_b, params: FlowParams = FlowParams()) -> FlowField:
    """Flow that carries ``frame_a`` onto ``frame_b`` (positive u = rightward)."""
    a = np.asarray(frame_a, dtype=np.float64)
    b = np.asarray(frame_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise InvalidInputError(f"flow needs two equal 2-D frames, got {a.shape} and {b.shape}")
    if params.presmooth_sigma > 0:
        a = ndimage.gaussian_filter(a, params.presmooth_sigma, mode="nearest")
        b = ndimage.gaussian_filter(b, params.presmooth_sigma, mode="nearest")
    pyr = [(a, b)]
    for _ in range(params.levels - 1):
        pa, pb = pyr[-1]
        if min(pa.shape) < 8:
            break
        pyr.append((_downsample(pa), _downsample(pb)))
    u = np.zeros(pyr[-1][0].shape)
    v = np.zeros_like(u)
    for la, lb in reversed(pyr):
        if u.shape != la.shape:
            u, v = _resize_flow(u, v, la.shape)
        u, v = _hs_level(la, lb, u, v, params)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise InvalidInputError("flow solver produced non-finite values")
    return FlowField(u.astype(np.float32), v.astype(np.float32))


# ---------------------------------------------------------------- flow cache


def write_flow(path, flow: FlowField) -> None:
    h, w = flow.u.shape
    with open(path, "wb") as fh:
        fh.write(_FLOW_MAGIC + struct.pack("<II", w, h))
        fh.write(flow.u.astype("<f4").tobytes())
        fh.write(flow.v.astype("<f4").tobytes())


def read_flow(path) -> FlowField:
    data = Path(path).read_bytes()
    if data[:5] != _FLOW_MAGIC:
        raise DataFormatError(f"{path}: not a FLOW1 file")
    w, h = struct.unpack_from("<II", data, 5)
    n = w * h
    arr = np.frombuffer(data, dtype="<f4", offset=13)
    if arr.size != 2 * n:
        raise DataFormatError(f"{path}: truncated flow payload")
    return FlowField(arr[:n].reshape(h, w).astype(np.float32), arr[n:].reshape(h, w).astype(np.float32))


def sequence_flows(frames, params: FlowParams = FlowParams(), cache_dir=None, threads: int = 1) -> list[FlowField]:
    """Flows between every consecutive frame pair, optionally cached on disk."""
    frames = np.asarray(frames)
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)

    def one(i):
        path = cache / f"flow_{i:06d}.bin" if cache is not None else None
        if path is not None and path.exists():
            return read_flow(path)
        f = estimate_flow(frames[i], frames[i + 1], params)
        if path is not None:
            write_flow(path, f)
        return f

    idx = range(len(frames) - 1)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(one, idx))
    return [one(i) for i in idx]


# ---------------------------------------------------------------- channel stack


@dataclass(frozen=True, eq=False)
class ChannelStack:
    planes: np.ndarray  # (13, H, W) float32
    anchor_frame: int
    flow_magnitude_max: np.ndarray  # (H, W), max over the 6 flow fields


def motion_planes(flow: FlowField, mode: str = "components") -> tuple[np.ndarray, np.ndarray]:
    if mode == "components":
        return np.abs(flow.u), np.abs(flow.v)
    if mode == "spatial_gradients":
        gy, gx = np.gradient(flow.magnitude.astype(np.float64))
        return np.abs(gx).astype(np.float32), np.abs(gy).astype(np.float32)
    raise InvalidInputError(f"unknown motion plane mode {mode!r}")


def stack_from_flows(gray_t, flows: Sequence[FlowField], t: int, mode: str = "components") -> ChannelStack:
    if len(flows) != TEMPORAL_DEPTH - 1:
        raise InvalidInputError(f"need {TEMPORAL_DEPTH - 1} flow fields, got {len(flows)}")
    planes = [np.asarray(gray_t, np.float32)]
    mag = np.zeros(planes[0].shape, np.float32)
    for f in flows:
        planes.extend(motion_planes(f, mode))
        np.maximum(mag, f.magnitude, out=mag)
    return ChannelStack(np.stack(planes).astype(np.float32), t, mag)


def build_channel_stack(seq, t: int, params: FlowParams = FlowParams(),
                        flows: Optional[Sequence[FlowField]] = None) -> ChannelStack:
    """Grayscale of frame t plus two motion planes for each flow t+k -> t+k+1, k = 0..5.

    ``flows``, when given, is the full list from :func:`sequence_flows`.
    """
    frames = seq.frames if hasattr(seq, "frames") else np.asarray(seq)
    n = len(frames)
    if t < 0 or t + TEMPORAL_DEPTH - 1 >= n:
        raise OutOfRangeError(f"anchor frame {t} needs frames {t}..{t + TEMPORAL_DEPTH - 1}; sequence has {n}")
    if flows is None:
        window = [estimate_flow(frames[t + k], frames[t + k + 1], params) for k in range(TEMPORAL_DEPTH - 1)]
    else:
        window = flows[t:t + TEMPORAL_DEPTH - 1]
    return stack_from_flows(frames[t], window, t, params.motion_planes)


def n_scoreable(n_frames: int) -> int:
    return max(0, n_frames - (TEMPORAL_DEPTH - 1))
