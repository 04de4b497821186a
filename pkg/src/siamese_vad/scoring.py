"""Anomaly scoring of test video against an exemplar model."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DataFormatError, InvalidInputError
from .exemplars import ExemplarModel, _by_frame, inference_head
from .flow import TEMPORAL_DEPTH, FlowParams, n_scoreable
from .patches import MotionGateParams, RegionGrid, sequence_patches
from .siamese import SiameseModel, pair_distance

SCORE_MAGIC = b"VADS1"
EMPTY_REGION_SCORE = 1.0
_EIGHT = np.ones((3, 3), bool)


@dataclass(eq=False)
class ScoreVolume:
    """Per-pixel scores for frames ``0 .. n - 7`` of one sequence."""

    scores: np.ndarray  # (frames, H, W) float64
    counts: Optional[np.ndarray] = None  # contributions per pixel
    sums: Optional[np.ndarray] = None
    sequence_id: str = ""

    @property
    def n_frames(self) -> int:
        return self.scores.shape[0]


def score_sequence(seq, exemplars: ExemplarModel, model: SiameseModel, grid: RegionGrid,
                   gate: MotionGateParams = MotionGateParams(), flow_params: FlowParams = FlowParams(),
                   temporal_mode: str = "anchor", cache_dir=None, threads: int = 1) -> ScoreVolume:
    """Mean nearest-exemplar distance of every gated-in patch covering each pixel.

    In ``anchor`` mode a patch only scores its anchor frame; ``spread`` mode
    also credits the following six frames that are still scoreable.
    """
    if temporal_mode not in ("anchor", "spread"):
        raise InvalidInputError(f"unknown temporal mode {temporal_mode!r}")
    if grid.descriptor() != exemplars.grid.descriptor():
        raise ConfigurationError("scoring grid does not match the exemplar model's grid")
    head = inference_head(model)
    if head.fingerprint != exemplars.fingerprint:
        raise ConfigurationError("exemplar model was built with a different Siamese model")
    n_s = n_scoreable(len(seq))
    sums = np.zeros((n_s, grid.frame_h, grid.frame_w))
    counts = np.zeros(sums.shape, np.int32)
    ph, pw = grid.patch_h, grid.patch_w
    span = 1 if temporal_mode == "anchor" else TEMPORAL_DEPTH
    projections = [s.projections(head) for s in exemplars.sets]
    for patches in _by_frame(sequence_patches(seq, grid, flow_params, gate, cache_dir=cache_dir, threads=threads)):
        proj = head.project(head.embed_raw(np.stack([p.data for p in patches])))
        for p, q in zip(patches, proj):
            sp = projections[p.region_id]
            s = float(head.distances(q, sp).min()) if len(sp) else EMPTY_REGION_SCORE
            x, y = grid.offset(p.region_id)
            t0 = p.anchor_frame
            t1 = min(t0 + span, n_s)
            sums[t0:t1, y:y + ph, x:x + pw] += s
            counts[t0:t1, y:y + ph, x:x + pw] += 1
    scores = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return ScoreVolume(scores, counts, sums, seq.sequence_id)


def frame_scores(vol) -> np.ndarray:
    scores = vol.scores if isinstance(vol, ScoreVolume) else np.asarray(vol)
    if scores.shape[0] == 0:
        return np.zeros(0)
    return scores.reshape(scores.shape[0], -1).max(axis=1)


@dataclass(frozen=True, eq=False)
class DetectedRegion:
    frame: int
    bbox: tuple  # (x, y, w, h)
    pixels: np.ndarray  # (k, 2) array of (row, col)


def label_detections(mask: np.ndarray):
    """8-connected components of a binary frame mask."""
    return ndimage.label(mask, structure=_EIGHT)


def threshold_detections(vol, tau: float):
    """Per-frame detection masks (score >= tau) and their connected regions."""
    scores = vol.scores if isinstance(vol, ScoreVolume) else np.asarray(vol)
    masks = scores >= tau
    regions = []
    for t, m in enumerate(masks):
        labels, n = label_detections(m)
        frame_regions = []
        for i, sl in enumerate(ndimage.find_objects(labels), start=1):
            rows, cols = np.nonzero(labels[sl] == i)
            pix = np.stack([rows + sl[0].start, cols + sl[1].start], axis=1)
            frame_regions.append(DetectedRegion(t, (sl[1].start, sl[0].start, sl[1].stop - sl[1].start,
                                                    sl[0].stop - sl[0].start), pix))
        regions.append(frame_regions)
    return masks, regions


# ---------------------------------------------------------------- large-error report


@dataclass
class ErrorEntry:
    index: int
    label: int
    p: float
    error: float
    provenance: str
    flagged: bool


@dataclass
class ErrorReport:
    entries: list = field(default_factory=list)
    error_floor: float = 0.5

    @property
    def flagged(self) -> list:
        return [e for e in self.entries if e.flagged]


def large_error_report(pairs, model: SiameseModel, top_k: int = 16, error_floor: float = 0.5,
                       batch: int = 256) -> ErrorReport:
    """Rank pairs by |label - predicted dissimilarity|, largest first."""
    from .pairs import PROVENANCE

    if top_k <= 0 or len(pairs) == 0:
        return ErrorReport([], error_floor)
    m = model.astype(np.float64)
    p = np.concatenate([pair_distance(m, pairs.x1[i:i + batch], pairs.x2[i:i + batch])
                        for i in range(0, len(pairs), batch)])
    err = np.abs(pairs.y.astype(float) - p)
    order = np.argsort(-err, kind="mergesort")[:top_k]
    entries = [ErrorEntry(int(i), int(pairs.y[i]), float(p[i]), float(err[i]),
                          PROVENANCE[int(pairs.provenance[i])], bool(err[i] > error_floor)) for i in order]
    return ErrorReport(entries, error_floor)


# ---------------------------------------------------------------- score files


def volume_to_bytes(vol: ScoreVolume) -> bytes:
    n, h, w = vol.scores.shape
    return SCORE_MAGIC + struct.pack("<III", n, w, h) + vol.scores.astype("<f4").tobytes()


def volume_from_bytes(data: bytes, sequence_id: str = "") -> ScoreVolume:
    if data[:5] != SCORE_MAGIC:
        raise DataFormatError("not a VADS1 score file")
    n, w, h = struct.unpack_from("<III", data, 5)
    if len(data) != 17 + 4 * n * w * h:
        raise DataFormatError("score file size does not match its header")
    scores = np.frombuffer(data, "<f4", offset=17).reshape(n, h, w).astype(np.float64)
    return ScoreVolume(scores, sequence_id=sequence_id)


def save_volume(vol: ScoreVolume, path) -> None:
    with open(path, "wb") as fh:
        fh.write(volume_to_bytes(vol))


def load_volume(path, sequence_id: str = "") -> ScoreVolume:
    with open(path, "rb") as fh:
        return volume_from_bytes(fh.read(), sequence_id)


def write_frame_scores_csv(path, series) -> None:
    with open(path, "w") as fh:
        fh.write("frame,score\n")
        for i, s in enumerate(series):
            fh.write(f"{i},{float(s):.9g}\n")
