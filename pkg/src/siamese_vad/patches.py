"""Region grid, video patch extraction and the motion gate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .errors import InvalidInputError, OutOfRangeError
from .flow import ChannelStack, FlowParams, n_scoreable, sequence_flows, stack_from_flows, TEMPORAL_DEPTH

PATCH_H = 20
PATCH_W = 20


@dataclass(frozen=True)
class RegionGrid:
    frame_w: int
    frame_h: int
    patch_h: int = PATCH_H
    patch_w: int = PATCH_W
    regions: tuple = field(default=(), compare=False)

    @property
    def stride_h(self) -> int:
        return self.patch_h // 2

    @property
    def stride_w(self) -> int:
        return self.patch_w // 2

    def __len__(self):
        return len(self.regions)

    def offset(self, region_id: int) -> tuple[int, int]:
        if not 0 <= region_id < len(self.regions):
            raise OutOfRangeError(f"region {region_id} outside grid of {len(self.regions)}")
        return self.regions[region_id]

    def descriptor(self) -> tuple[int, ...]:
        return (self.frame_w, self.frame_h, self.patch_h, self.patch_w, self.stride_h, self.stride_w)


def _offsets(length, patch, stride):
    offs = list(range(0, length - patch + 1, stride))
    if offs[-1] != length - patch:
        offs.append(length - patch)
    return offs


def build_grid(frame_w: int, frame_h: int, patch_h: int = PATCH_H, patch_w: int = PATCH_W) -> RegionGrid:
    """Row-major regions at half-patch stride; the last row/column is clamped inward."""
    if frame_w < patch_w or frame_h < patch_h:
        raise InvalidInputError(f"frame {frame_w}x{frame_h} is smaller than a {patch_w}x{patch_h} patch")
    regions = tuple((x, y) for y in _offsets(frame_h, patch_h, patch_h // 2)
                    for x in _offsets(frame_w, patch_w, patch_w // 2))
    return RegionGrid(frame_w, frame_h, patch_h, patch_w, regions)


def grid_from_descriptor(desc) -> RegionGrid:
    frame_w, frame_h, ph, pw, sh, sw = (int(v) for v in desc)
    grid = build_grid(frame_w, frame_h, ph, pw)
    if (grid.stride_h, grid.stride_w) != (sh, sw):
        raise InvalidInputError(f"unsupported grid strides {(sh, sw)}")
    return grid


@dataclass(frozen=True, eq=False)
class VideoPatch:
    data: np.ndarray  # (H, W, C)
    region_id: int
    anchor_frame: int
    sequence_id: str = ""


@dataclass(frozen=True)
class MotionGateParams:
    active_fraction_min: float = 0.20
    flow_mag_thresh: float = 0.5
    frame_diff_thresh: float = 10.0

    def __post_init__(self):
        if not 0 < self.active_fraction_min <= 1:
            raise InvalidInputError("active_fraction_min must lie in (0, 1]")
        if self.flow_mag_thresh < 0 or self.frame_diff_thresh < 0:
            raise InvalidInputError("gate thresholds must be nonnegative")

    def min_active(self, n_pixels: int) -> int:
        return math.ceil(self.active_fraction_min * n_pixels - 1e-9)


def extract_patch(stack: ChannelStack, grid: RegionGrid, region_id: int, sequence_id: str = "") -> VideoPatch:
    x, y = grid.offset(region_id)
    data = stack.planes[:, y:y + grid.patch_h, x:x + grid.patch_w].transpose(1, 2, 0).copy()
    return VideoPatch(data, region_id, stack.anchor_frame, sequence_id)


def patch_flow_magnitude(data: np.ndarray) -> np.ndarray:
    """Per-pixel max flow magnitude recovered from |u|, |v| component planes."""
    motion = data[..., 1:].astype(np.float64)
    return np.sqrt(motion[..., 0::2] ** 2 + motion[..., 1::2] ** 2).max(axis=-1)


def active_pixels(gray_t, flow_mag, params: MotionGateParams, prev_gray=None) -> np.ndarray:
    active = np.asarray(flow_mag) > params.flow_mag_thresh
    if prev_gray is not None:
        diff = np.abs(np.asarray(gray_t, np.float64) - np.asarray(prev_gray, np.float64))
        active |= diff > params.frame_diff_thresh
    return active


def motion_gate(patch: VideoPatch, params: MotionGateParams = MotionGateParams(),
                prev_gray: Optional[np.ndarray] = None, flow_mag: Optional[np.ndarray] = None) -> bool:
    """True (keep) iff at least the minimum fraction of pixels shows motion.

    ``flow_mag`` defaults to the magnitude implied by component motion planes;
    pass it explicitly when the patch carries spatial-gradient planes.
    """
    if flow_mag is None:
        flow_mag = patch_flow_magnitude(patch.data)
    active = active_pixels(patch.data[..., 0], flow_mag, params, prev_gray)
    return int(active.sum()) >= params.min_active(active.size)


def region_gate(active: np.ndarray, grid: RegionGrid, params: MotionGateParams) -> np.ndarray:
    """Vectorized gate for every region of one frame given its active-pixel map."""
    integral = np.pad(active.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    xs = np.array([r[0] for r in grid.regions])
    ys = np.array([r[1] for r in grid.regions])
    ph, pw = grid.patch_h, grid.patch_w
    counts = integral[ys + ph, xs + pw] - integral[ys, xs + pw] - integral[ys + ph, xs] + integral[ys, xs]
    return counts >= params.min_active(ph * pw)


@dataclass
class GateCounts:
    total: int = 0
    gated_out: int = 0


def sequence_patches(seq, grid: RegionGrid, flow_params: FlowParams = FlowParams(),
                     gate: MotionGateParams = MotionGateParams(), flows=None, cache_dir=None,
                     counts: Optional[GateCounts] = None, threads: int = 1) -> Iterator[VideoPatch]:
    """Gated-in patches of a sequence in (frame, region) order."""
    frames = seq.frames
    if flows is None:
        flows = sequence_flows(frames, flow_params, cache_dir=cache_dir, threads=threads)
    for t in range(n_scoreable(len(frames))):
        stack = stack_from_flows(frames[t], flows[t:t + TEMPORAL_DEPTH - 1], t, flow_params.motion_planes)
        prev = frames[t - 1] if t > 0 else None
        keep = region_gate(active_pixels(frames[t], stack.flow_magnitude_max, gate, prev), grid, gate)
        for rid in range(len(grid)):
            if counts is not None:
                counts.total += 1
            if not keep[rid]:
                if counts is not None:
                    counts.gated_out += 1
                continue
            yield extract_patch(stack, grid, rid, seq.sequence_id)
