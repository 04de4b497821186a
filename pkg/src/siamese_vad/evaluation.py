"""Frame, pixel, region and track criteria over score volumes.

Only scoreable frames enter any denominator: for every test sequence the
last six frames carry no score and are dropped from ground truth as well.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import DataError, UndefinedMetricError
from .flow import n_scoreable
from .roc import area_upto, equal_error_rate, roc_points

COVERAGE_MIN = 0.4
IOU_MIN = 0.1
TRACK_FRACTION = 0.1
FPPF_RANGE = 1.0
_EIGHT = np.ones((3, 3), bool)


# ---------------------------------------------------------------- overlap


def box_iou(a, b) -> float:
    """IOU of two ``(x, y, w, h)`` rectangles."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def iou(a, b) -> float:
    """IOU of two boxes ``(x, y, w, h)`` or two same-shaped boolean masks; both empty gives 0."""
    if not isinstance(a, np.ndarray) and not isinstance(b, np.ndarray):
        return box_iou(a, b)
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def box_mask(box, shape) -> np.ndarray:
    x, y, w, h = box
    m = np.zeros(shape, bool)
    m[max(y, 0):max(y + h, 0), max(x, 0):max(x + w, 0)] = True
    return m


# ---------------------------------------------------------------- ground truth


@dataclass(frozen=True, eq=False)
class GtRegion:
    frame: int  # global scoreable-frame index
    mask: np.ndarray  # bool (H, W)
    track: Optional[tuple] = None  # (sequence_id, track_id)


@dataclass(eq=False)
class GroundTruth:
    """Annotations restricted to scoreable frames, concatenated over sequences."""

    masks: Optional[np.ndarray]  # (N, H, W) bool or None
    regions: list  # GtRegion, ordered by frame
    tracks: dict  # (sequence_id, track_id) -> list of region indices
    n_frames: int
    sequence_ids: list = field(default_factory=list)
    frame_offsets: list = field(default_factory=list)

    def regions_by_frame(self) -> list:
        out = [[] for _ in range(self.n_frames)]
        for i, r in enumerate(self.regions):
            out[r.frame].append(i)
        return out

    @classmethod
    def from_partition(cls, test) -> "GroundTruth":
        """GT regions come from track boxes where present, else mask components."""
        masks, regions, tracks, sids, offsets = [], [], {}, [], []
        n_total = 0
        have_masks = test.pixel_masks is not None
        for seq in test.sequences:
            sid = seq.sequence_id
            n_s = n_scoreable(len(seq))
            sids.append(sid)
            offsets.append(n_total)
            m = test.masks_for(sid) if have_masks else None
            if m is not None:
                masks.append(np.asarray(m[:n_s], bool))
            boxes = test.tracks_for(sid) if test.track_boxes is not None else []
            shape = (seq.height, seq.width)
            if boxes:
                for b in sorted(boxes, key=lambda b: (b.frame, b.track_id)):
                    if b.frame >= n_s:
                        continue
                    key = (sid, b.track_id)
                    tracks.setdefault(key, []).append(len(regions))
                    regions.append(GtRegion(n_total + b.frame, box_mask((b.x, b.y, b.w, b.h), shape), key))
            elif m is not None:
                for t in range(n_s):
                    labels, k = ndimage.label(m[t], structure=_EIGHT)
                    for i in range(1, k + 1):
                        regions.append(GtRegion(n_total + t, labels == i))
            n_total += n_s
        regions.sort(key=lambda r: r.frame)
        # region indices shift under the sort; rebuild the track lists
        tracks = {}
        for i, r in enumerate(regions):
            if r.track is not None:
                tracks.setdefault(r.track, []).append(i)
        stacked = np.concatenate(masks) if have_masks and masks else None
        return cls(stacked, regions, tracks, n_total, sids, offsets)


def stack_volumes(volumes) -> np.ndarray:
    """Concatenate per-sequence score arrays along the frame axis."""
    return np.concatenate([v.scores if hasattr(v, "scores") else np.asarray(v) for v in volumes])


# ---------------------------------------------------------------- curves


@dataclass(eq=False)
class RocCurve:
    criterion: str
    thresholds: np.ndarray
    x: np.ndarray  # FPR or false positives per frame
    tpr: np.ndarray
    auc: float
    eer: Optional[float] = None
    x_range: float = 1.0

    def tpr_at(self, x_max: float) -> float:
        ok = self.x <= x_max + 1e-12
        return float(self.tpr[ok].max()) if ok.any() else 0.0

    def summary(self) -> dict:
        out = {"criterion": self.criterion, "auc": self.auc}
        if self.eer is not None:
            out["eer"] = self.eer
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "x", "tpr"])
            for t, x, y in zip(self.thresholds, self.x, self.tpr):
                w.writerow([repr(float(t)), repr(float(x)), repr(float(y))])


def _rate_curve(criterion, stat, positive) -> RocCurve:
    thr, fpr, tpr = roc_points(stat, positive)
    eer = equal_error_rate(fpr, tpr)
    return RocCurve(criterion, thr, fpr, tpr, area_upto(fpr, tpr, 1.0), None if np.isnan(eer) else eer)


def frame_level_roc(series, gt: GroundTruth) -> RocCurve:
    """A frame is positive iff its mask has any anomalous pixel."""
    series = np.asarray(series, np.float64)
    if gt.masks is None:
        raise DataError("frame-level criterion needs pixel masks")
    if series.shape[0] != gt.n_frames:
        raise DataError(f"{series.shape[0]} frame scores for {gt.n_frames} annotated frames")
    return _rate_curve("frame", series, gt.masks.reshape(gt.n_frames, -1).any(axis=1))


def coverage_rank(n_anomalous: int, coverage_min: float) -> int:
    """Smallest detected-pixel count that reaches ``coverage_min`` of ``n_anomalous``."""
    k = int(np.ceil(coverage_min * n_anomalous - 1e-9))
    return max(k, 1)


def pixel_level_roc(scores, gt: GroundTruth, coverage_min: float = COVERAGE_MIN) -> RocCurve:
    """Frame ROC where a positive frame also needs ``coverage_min`` of its anomaly detected.

    Each frame reduces to one statistic: for a negative frame the largest
    score (it fires iff any pixel is detected); for a positive frame the
    k-th largest score inside its mask with k the coverage count. Sweeping
    that statistic reproduces the per-threshold rule exactly.
    """
    scores = stack_volumes(scores) if isinstance(scores, (list, tuple)) else np.asarray(scores, np.float64)
    if gt.masks is None:
        raise DataError("pixel-level criterion needs pixel masks")
    if scores.shape != gt.masks.shape:
        raise DataError(f"score volume {scores.shape} does not match masks {gt.masks.shape}")
    stat = np.empty(gt.n_frames)
    positive = np.zeros(gt.n_frames, bool)
    for t in range(gt.n_frames):
        inside = scores[t][gt.masks[t]]
        if inside.size:
            positive[t] = True
            k = coverage_rank(inside.size, coverage_min)
            stat[t] = np.partition(inside, inside.size - k)[inside.size - k]
        else:
            stat[t] = scores[t].max()
    return _rate_curve("pixel", stat, positive)


# ---------------------------------------------------------------- detection sweep


@dataclass(eq=False)
class DetectionSweep:
    """Region matching results for a decreasing list of thresholds."""

    thresholds: np.ndarray  # starts at +inf (nothing detected)
    matched: np.ndarray  # (n_thr, n_gt_regions) bool
    false_positives: np.ndarray  # (n_thr,) int
    n_frames: int


def sweep_thresholds(scores, max_thresholds: Optional[int] = None) -> np.ndarray:
    """Distinct scores in decreasing order, optionally thinned by rank.

    Thinning picks evenly spaced ranks, so any strictly increasing remap of
    the scores selects the same operating points.
    """
    u = np.unique(np.asarray(scores, np.float64))[::-1]
    if max_thresholds is not None and u.size > max_thresholds:
        idx = np.unique(np.round(np.linspace(0, u.size - 1, max_thresholds)).astype(int))
        u = u[idx]
    return u


def match_frame(labels: np.ndarray, n_det: int, gt_masks, iou_min: float = IOU_MIN):
    """Which GT regions are hit and how many detections match nothing."""
    det_area = np.bincount(labels.ravel(), minlength=n_det + 1)
    det_hit = np.zeros(n_det + 1, bool)
    gt_hit = np.zeros(len(gt_masks), bool)
    for j, g in enumerate(gt_masks):
        inter = np.bincount(labels[g], minlength=n_det + 1)
        union = det_area + np.count_nonzero(g) - inter
        ok = (inter > 0) & (inter / np.maximum(union, 1) >= iou_min)
        ok[0] = False
        if ok.any():
            gt_hit[j] = True
            det_hit |= ok
    return gt_hit, int(n_det - det_hit[1:].sum())


def detection_sweep(scores, gt: GroundTruth, thresholds=None, max_thresholds: Optional[int] = 200,
                    iou_min: float = IOU_MIN) -> DetectionSweep:
    """Threshold the volume at each level, label 8-connected detections and match them."""
    scores = stack_volumes(scores) if isinstance(scores, (list, tuple)) else np.asarray(scores, np.float64)
    if scores.shape[0] != gt.n_frames:
        raise DataError(f"{scores.shape[0]} scored frames for {gt.n_frames} annotated frames")
    if thresholds is None:
        thresholds = sweep_thresholds(scores, max_thresholds)
    thresholds = np.r_[np.inf, np.asarray(thresholds, np.float64)]
    by_frame = gt.regions_by_frame()
    frame_max = scores.reshape(gt.n_frames, -1).max(axis=1)
    matched = np.zeros((thresholds.size, len(gt.regions)), bool)
    fps = np.zeros(thresholds.size, np.int64)
    for i, tau in enumerate(thresholds):
        for t in np.nonzero(frame_max >= tau)[0]:
            labels, n = ndimage.label(scores[t] >= tau, structure=_EIGHT)
            idx = by_frame[t]
            hit, fp = match_frame(labels, n, [gt.regions[j].mask for j in idx], iou_min)
            matched[i, idx] = hit
            fps[i] += fp
    return DetectionSweep(thresholds, matched, fps, gt.n_frames)


def _fppf_curve(criterion, thresholds, fppf, tpr) -> RocCurve:
    """Best TPR reachable at each distinct FPPF, joined linearly.

    FPPF is not monotone in the threshold (detections merge as the
    threshold drops), so each distinct FPPF value gets the largest TPR of
    any operating point at or below it. The reported threshold is the
    highest one achieving that TPR.
    """
    xs = np.unique(fppf)
    ys = np.empty(xs.size)
    thr = np.empty(xs.size)
    best, best_thr = -1.0, np.inf
    for i, x in enumerate(xs):
        at = np.nonzero(fppf == x)[0]
        j = at[np.lexsort((-thresholds[at], -tpr[at]))[0]]
        if tpr[j] > best:
            best, best_thr = tpr[j], thresholds[j]
        ys[i], thr[i] = best, best_thr
    return RocCurve(criterion, thr, xs, ys, area_upto(xs, ys, FPPF_RANGE) / FPPF_RANGE, None, FPPF_RANGE)


def region_based_roc(sweep: DetectionSweep, gt: GroundTruth) -> RocCurve:
    if not gt.regions:
        raise UndefinedMetricError("region-based criterion needs ground-truth regions")
    tpr = sweep.matched.sum(axis=1) / len(gt.regions)
    return _fppf_curve("region", sweep.thresholds, sweep.false_positives / sweep.n_frames, tpr)


def track_hits(sweep: DetectionSweep, gt: GroundTruth, fraction: float = TRACK_FRACTION) -> np.ndarray:
    """(n_thr, n_tracks) bool: enough of the track's frames are matched."""
    cols = []
    for key in sorted(gt.tracks):
        idx = gt.tracks[key]
        need = int(np.ceil(fraction * len(idx) - 1e-9))
        cols.append(sweep.matched[:, idx].sum(axis=1) >= max(need, 1))
    return np.stack(cols, axis=1)


def track_based_roc(sweep: DetectionSweep, gt: GroundTruth, fraction: float = TRACK_FRACTION) -> RocCurve:
    if not gt.tracks:
        raise UndefinedMetricError("track-based criterion needs ground-truth tracks")
    tpr = track_hits(sweep, gt, fraction).mean(axis=1)
    return _fppf_curve("track", sweep.thresholds, sweep.false_positives / sweep.n_frames, tpr)


# ---------------------------------------------------------------- all criteria


@dataclass
class EvaluationResult:
    curves: dict  # criterion -> RocCurve
    skipped: dict  # criterion -> reason
    n_frames: int
    excluded_frames: int

    def summary(self) -> dict:
        return {
            "criteria": [c.summary() for c in self.curves.values()],
            "skipped": self.skipped,
            "scoreable_frames": self.n_frames,
            "excluded_tail_frames": self.excluded_frames,
            "track_tpr_at_1fppf": self.curves["track"].tpr_at(1.0) if "track" in self.curves else None,
            "region_tpr_at_1fppf": self.curves["region"].tpr_at(1.0) if "region" in self.curves else None,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def evaluate(volumes: Sequence, test, coverage_min: float = COVERAGE_MIN,
             max_thresholds: Optional[int] = 200) -> EvaluationResult:
    """Run every criterion the annotations support."""
    gt = GroundTruth.from_partition(test)
    scores = stack_volumes(volumes)
    curves, skipped = {}, {}
    series = scores.reshape(scores.shape[0], -1).max(axis=1)
    for name, fn in (("frame", lambda: frame_level_roc(series, gt)),
                     ("pixel", lambda: pixel_level_roc(scores, gt, coverage_min))):
        try:
            curves[name] = fn()
        except (UndefinedMetricError, DataError) as exc:
            if not isinstance(exc, UndefinedMetricError) and gt.masks is not None:
                raise
            skipped[name] = str(exc)
    sweep = detection_sweep(scores, gt, max_thresholds=max_thresholds) if gt.regions else None
    for name, fn in (("region", region_based_roc), ("track", track_based_roc)):
        try:
            if sweep is None:
                raise UndefinedMetricError("no ground-truth regions")
            curves[name] = fn(sweep, gt)
        except UndefinedMetricError as exc:
            skipped[name] = str(exc)
    excluded = sum(len(s) for s in test.sequences) - gt.n_frames
    return EvaluationResult(curves, skipped, gt.n_frames, excluded)
