"""Similar/dissimilar patch-pair curation from labeled source datasets.

For every source, test patches are matched against train patches of the
same region with a normalized L1 distance. Normal test patches close to
their nearest train patch become similar pairs; anomalous test patches are
paired with their nearest train patch and with further train patches sampled
with probability inversely proportional to distance. Self-augmented copies
of train patches top up the similar class until both classes are equal.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from .errors import CurationError, DataFormatError, EmptyRegionError, InvalidInputError
from .flow import FlowParams
from .media import DatasetPartition
from .patches import MotionGateParams, RegionGrid, VideoPatch, build_grid, sequence_patches
from .training import preprocess, resample

log = logging.getLogger(__name__)

PROVENANCE = ("nn_match", "hard_negative", "sampled_negative", "self_augmented")
PAIR_MAGIC = b"VADP1"


@dataclass(frozen=True)
class AdaptiveThreshold:
    mu: float
    sigma: float
    alpha: float = 0.2

    @property
    def value(self) -> float:
        return self.mu + self.alpha * self.sigma


@dataclass(frozen=True)
class CurationConfig:
    pairs_per_class: int = 4000
    negatives_per_anomaly: int = 8
    alpha: float = 0.2
    min_anomaly_overlap: float = 0.5
    self_augmented_fraction: float = 0.25
    max_translation: int = 2
    scale_range: tuple = (0.85, 1.0)
    flow_scale: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if self.pairs_per_class <= 0 or self.negatives_per_anomaly <= 0:
            raise InvalidInputError("pair counts must be positive")


@dataclass(frozen=True, eq=False)
class PairExample:
    patch_a: np.ndarray
    patch_b: np.ndarray
    label: int
    provenance: str
    pre_distance: Optional[float]


@dataclass(eq=False)
class PairSet:
    """Column-wise pair dataset; patches are stored preprocessed to [-1, 1]."""

    x1: np.ndarray
    x2: np.ndarray
    y: np.ndarray
    provenance: np.ndarray
    pre_distance: np.ndarray
    thresholds: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i) -> PairExample:
        d = float(self.pre_distance[i])
        return PairExample(self.x1[i], self.x2[i], int(self.y[i]), PROVENANCE[self.provenance[i]],
                           None if np.isnan(d) else d)

    def class_counts(self) -> tuple[int, int]:
        n1 = int(self.y.sum())
        return len(self.y) - n1, n1


def normalized_l1(a, b) -> float:
    a = a.data if isinstance(a, VideoPatch) else np.asarray(a)
    b = b.data if isinstance(b, VideoPatch) else np.asarray(b)
    if a.shape != b.shape:
        raise InvalidInputError(f"patch shapes differ: {a.shape} vs {b.shape}")
    return float(np.abs(a.astype(np.float64) - b.astype(np.float64)).sum() / a.size)


def l1_matrix(queries, refs) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64).reshape(len(queries), -1)
    r = np.asarray(refs, dtype=np.float64).reshape(len(refs), -1)
    return cdist(q, r, "cityblock") / q.shape[1]


def nn_over_train(test_patch, train_patches) -> tuple[int, float]:
    """Exact argmin of normalized L1; ties go to the earliest train patch."""
    if len(train_patches) == 0:
        raise EmptyRegionError("region has no train patches")
    t = test_patch.data if isinstance(test_patch, VideoPatch) else test_patch
    refs = [p.data if isinstance(p, VideoPatch) else p for p in train_patches]
    d = l1_matrix(np.asarray(t)[None], np.stack(refs))[0]
    i = int(np.argmin(d))
    return i, float(d[i])


def fit_threshold(nn_distances, alpha: float = 0.2) -> AdaptiveThreshold:
    d = np.asarray(nn_distances, dtype=np.float64)
    if d.size == 0:
        raise InvalidInputError("cannot fit a threshold to an empty distance list")
    return AdaptiveThreshold(float(d.mean()), float(d.std()), alpha)


def inverse_distance_acceptance(d_min: float, d: float) -> float:
    if d <= 0:
        return 1.0
    return min(1.0, d_min / d)


# ---------------------------------------------------------------- per-source patch pools


@dataclass
class _RegionPool:
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    test_status: list = field(default_factory=list)  # 1 anomalous, 0 normal, -1 ambiguous


def anomaly_status(mask_t, components, x, y, ph, pw, min_overlap=0.5) -> int:
    """1 if the footprint is mostly anomalous, 0 if untouched, -1 otherwise.

    Mostly anomalous means either half of the footprint is masked or the
    footprint holds at least half of one connected anomaly, so anomalies
    smaller than half a patch still produce anomalous patches.
    """
    win = mask_t[y:y + ph, x:x + pw]
    inside = int(win.sum())
    if inside == 0:
        return 0
    if inside >= min_overlap * ph * pw:
        return 1
    labels, sizes = components
    lw = labels[y:y + ph, x:x + pw]
    ids, counts = np.unique(lw[lw > 0], return_counts=True)
    for i, c in zip(ids, counts):
        if c >= min_overlap * sizes[i]:
            return 1
    return -1


def _mask_components(mask_t):
    labels, n = ndimage.label(mask_t, structure=np.ones((3, 3)))
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    return labels, sizes


def _collect(train: DatasetPartition, test: DatasetPartition, grid: RegionGrid, flow_params, gate,
             cfg: CurationConfig, cache_dir=None, threads=1):
    pools = [_RegionPool() for _ in range(len(grid))]
    for seq in train.sequences:
        cdir = None if cache_dir is None else f"{cache_dir}/train/{seq.sequence_id}"
        for p in sequence_patches(seq, grid, flow_params, gate, cache_dir=cdir, threads=threads):
            pools[p.region_id].train.append(preprocess(p.data, cfg.flow_scale))
    for seq in test.sequences:
        masks = test.masks_for(seq.sequence_id)
        comp_cache = {}
        cdir = None if cache_dir is None else f"{cache_dir}/test/{seq.sequence_id}"
        for p in sequence_patches(seq, grid, flow_params, gate, cache_dir=cdir, threads=threads):
            status = 0
            if masks is not None:
                t = p.anchor_frame
                if t not in comp_cache:
                    comp_cache = {t: _mask_components(masks[t])}
                x, y = grid.offset(p.region_id)
                status = anomaly_status(masks[t], comp_cache[t], x, y, grid.patch_h, grid.patch_w,
                                        cfg.min_anomaly_overlap)
            pool = pools[p.region_id]
            pool.test.append(preprocess(p.data, cfg.flow_scale))
            pool.test_status.append(status)
    return pools


def self_augment(x, rng, max_translation=2, scale_range=(0.85, 1.0)) -> np.ndarray:
    dy, dx = rng.integers(-max_translation, max_translation + 1, size=2)
    s = rng.uniform(*scale_range)
    return resample(x, s, (float(dy), float(dx))).astype(np.float32)


def curate_pairs(sources: Sequence[tuple[DatasetPartition, DatasetPartition]], cfg: CurationConfig = CurationConfig(),
                 flow_params: FlowParams = FlowParams(), gate: MotionGateParams = MotionGateParams(),
                 cache_dirs: Optional[Sequence] = None, threads: int = 1) -> PairSet:
    """Build a balanced, shuffled pair dataset from ``(train, test)`` source partitions."""
    rng = np.random.default_rng(cfg.seed)
    # nearest-neighbour pass over every source and region
    records = []  # (pool, region nn distances, nn indices, full distance matrix)
    normal_d, anomal_d = [], []
    for si, (train, test) in enumerate(sources):
        if test.pixel_masks is None:
            log.warning("source %d has no test masks; its test patches all count as normal", si)
        seq0 = train.sequences[0]
        grid = build_grid(seq0.width, seq0.height)
        cache = None if cache_dirs is None else cache_dirs[si]
        pools = _collect(train, test, grid, flow_params, gate, cfg, cache, threads)
        for rid, pool in enumerate(pools):
            if not pool.test:
                continue
            if not pool.train:
                log.warning("source %d region %d has no train patches; skipping %d test patches",
                            si, rid, len(pool.test))
                continue
            tr = np.stack(pool.train)
            te = np.stack(pool.test)
            status = np.array(pool.test_status)
            keep = status >= 0
            te, status = te[keep], status[keep]
            if not len(te):
                continue
            dist = l1_matrix(te, tr)
            nn = dist.argmin(axis=1)
            dmin = dist[np.arange(len(te)), nn]
            normal_d.extend(dmin[status == 0].tolist())
            anomal_d.extend(dmin[status == 1].tolist())
            records.append((tr, te, status, dist, nn, dmin))

    if not anomal_d:
        raise CurationError("no anomalous test patches in any source; cannot form the dissimilar class")
    sim_thr = fit_threshold(normal_d, cfg.alpha) if normal_d else None
    dis_thr = fit_threshold(anomal_d, cfg.alpha)

    sim_a, sim_b, sim_d = [], [], []
    dis_a, dis_b, dis_d, dis_p = [], [], [], []
    train_pool = []
    for tr, te, status, dist, nn, dmin in records:
        train_pool.append(tr)
        for i in range(len(te)):
            if status[i] == 0:
                if sim_thr is not None and dmin[i] <= sim_thr.value:
                    sim_a.append(te[i]); sim_b.append(tr[nn[i]]); sim_d.append(dmin[i])
                continue
            if dmin[i] < dis_thr.value:
                continue
            dis_a.append(te[i]); dis_b.append(tr[nn[i]]); dis_d.append(dmin[i]); dis_p.append(1)
            accepted = 0
            for j in rng.permutation(len(tr)):
                if accepted >= cfg.negatives_per_anomaly - 1:
                    break
                if j == nn[i]:
                    continue
                if rng.random() < inverse_distance_acceptance(dmin[i], dist[i, j]):
                    dis_a.append(te[i]); dis_b.append(tr[j]); dis_d.append(dist[i, j]); dis_p.append(2)
                    accepted += 1
    if not dis_a:
        raise CurationError("no anomalous test patch cleared the dissimilar-class threshold")

    n_dis = len(dis_a)
    if n_dis > cfg.pairs_per_class:
        pick = np.sort(rng.choice(n_dis, cfg.pairs_per_class, replace=False))
        dis_a = [dis_a[i] for i in pick]; dis_b = [dis_b[i] for i in pick]
        dis_d = [dis_d[i] for i in pick]; dis_p = [dis_p[i] for i in pick]
        n_dis = cfg.pairs_per_class
    n_aug = max(int(round(cfg.self_augmented_fraction * n_dis)), n_dis - len(sim_a))
    n_nn = n_dis - n_aug
    if len(sim_a) > n_nn:
        pick = np.sort(rng.choice(len(sim_a), n_nn, replace=False))
        sim_a = [sim_a[i] for i in pick]; sim_b = [sim_b[i] for i in pick]; sim_d = [sim_d[i] for i in pick]
    all_train = np.concatenate(train_pool)
    aug_a, aug_b = [], []
    for i in rng.integers(0, len(all_train), size=n_aug):
        aug_a.append(all_train[i])
        aug_b.append(self_augment(all_train[i], rng, cfg.max_translation, cfg.scale_range))

    shape = all_train.shape[1:]

    def stack(xs):
        return np.stack(xs).astype(np.float32) if xs else np.zeros((0,) + shape, np.float32)

    x1 = np.concatenate([stack(sim_a), stack(aug_a), stack(dis_a)])
    x2 = np.concatenate([stack(sim_b), stack(aug_b), stack(dis_b)])
    y = np.r_[np.zeros(len(sim_a) + len(aug_a)), np.ones(len(dis_a))].astype(np.uint8)
    prov = np.r_[np.zeros(len(sim_a)), np.full(len(aug_a), 3), np.array(dis_p)].astype(np.uint8)
    pre = np.r_[sim_d, np.full(len(aug_a), np.nan), dis_d].astype(np.float32)
    order = rng.permutation(len(y))
    thresholds = {"similar": sim_thr, "dissimilar": dis_thr}
    return PairSet(x1[order], x2[order], y[order], prov[order], pre[order], thresholds)


# ---------------------------------------------------------------- pair file


def _record_dtype(shape):
    return np.dtype([("label", "u1"), ("prov", "u1"), ("d", "<f4"), ("a", "<f4", shape), ("b", "<f4", shape)])


def pairs_to_bytes(pairs: PairSet) -> bytes:
    shape = pairs.x1.shape[1:] if len(pairs) else (20, 20, 13)
    rec = np.zeros(len(pairs), _record_dtype(shape))
    rec["label"], rec["prov"], rec["d"] = pairs.y, pairs.provenance, pairs.pre_distance
    rec["a"], rec["b"] = pairs.x1, pairs.x2
    return PAIR_MAGIC + struct.pack("<I", len(pairs)) + rec.tobytes()


def pairs_from_bytes(data: bytes, shape=(20, 20, 13)) -> PairSet:
    if data[:5] != PAIR_MAGIC:
        raise DataFormatError("not a VADP1 pair file")
    (n,) = struct.unpack_from("<I", data, 5)
    dt = _record_dtype(shape)
    if len(data) != 9 + n * dt.itemsize:
        raise DataFormatError("pair file size does not match its record count")
    rec = np.frombuffer(data, dt, count=n, offset=9)
    return PairSet(rec["a"].astype(np.float32), rec["b"].astype(np.float32), rec["label"].copy(),
                   rec["prov"].copy(), rec["d"].astype(np.float32))


def save_pairs(pairs: PairSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(pairs_to_bytes(pairs))


def load_pairs(path) -> PairSet:
    with open(path, "rb") as fh:
        return pairs_from_bytes(fh.read())
