"""Region-specific exemplar sets built greedily with the learned distance."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DataFormatError, ModelMismatchError, UnusableModelError
from .flow import FlowParams
from .media import DatasetPartition
from .patches import MotionGateParams, RegionGrid, grid_from_descriptor, sequence_patches
from .siamese import SiameseModel, dissimilar_prob, embed
from .training import preprocess

log = logging.getLogger(__name__)

EXEMPLAR_MAGIC = b"VADE1"
INSERT_THRESHOLD = 0.3


class InferenceHead:
    """Float64 view of a frozen model for embedding and exemplar scans.

    fc1 is linear, so ``fc1(f - e) = W f - W e``; projections of stored
    exemplars are computed once and each comparison only evaluates the
    remaining ReLU and fc2.
    """

    def __init__(self, model: SiameseModel):
        self.model = model.astype(np.float64)
        self.fingerprint = model.fingerprint()
        p = self.model.params
        self.w1, self.b1, self.w2, self.b2 = p["fc1.weight"], p["fc1.bias"], p["fc2.weight"], p["fc2.bias"]
        self.flow_scale = model.arch.flow_scale

    def embed_raw(self, raw) -> np.ndarray:
        """Canonical (float32) embeddings of raw patches."""
        return embed(self.model, preprocess(raw, self.flow_scale)).astype(np.float32)

    def project(self, feats) -> np.ndarray:
        return np.asarray(feats, dtype=np.float64) @ self.w1

    def distances(self, query_proj, set_proj) -> np.ndarray:
        h = np.maximum(query_proj - set_proj + self.b1, 0.0)
        logits = np.atleast_2d(h @ self.w2 + self.b2)
        return dissimilar_prob(logits)


_HEADS: dict = {}


def inference_head(model: SiameseModel) -> InferenceHead:
    head = _HEADS.get(id(model))
    if head is None or head.model.arch != model.arch or head.source is not model:
        head = InferenceHead(model)
        head.source = model
        _HEADS.clear()
        _HEADS[id(model)] = head
    return head


@dataclass(eq=False)
class ExemplarSet:
    region_id: int
    fingerprint: bytes
    features: list = field(default_factory=list)  # float32 vectors
    provenance: list = field(default_factory=list)  # (sequence index, anchor frame)
    _proj: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self):
        return len(self.features)

    def projections(self, head: InferenceHead) -> np.ndarray:
        if self._proj is None or len(self._proj) != len(self.features):
            self._proj = head.project(np.stack(self.features)) if self.features else np.zeros((0, head.w1.shape[1]))
        return self._proj


def _check_fingerprint(s: ExemplarSet, head: InferenceHead):
    if s.fingerprint != head.fingerprint:
        raise ModelMismatchError(f"exemplar set for region {s.region_id} was built with a different model")


def nearest_exemplar(s: ExemplarSet, f, model: SiameseModel):
    """``(distance, index)`` of the closest exemplar, or None for an empty set."""
    head = inference_head(model)
    _check_fingerprint(s, head)
    if not s.features:
        return None
    d = head.distances(head.project(np.asarray(f, np.float32)), s.projections(head))
    i = int(np.argmin(d))
    return float(d[i]), i


def try_insert(s: ExemplarSet, f, model: SiameseModel, threshold: float = INSERT_THRESHOLD, provenance=(0, 0)):
    """Insert ``f`` iff the set is empty or its nearest exemplar is farther than ``threshold``.

    Returns ``(inserted, nearest_distance_or_None)``.
    """
    f = np.asarray(f, dtype=np.float32)
    near = nearest_exemplar(s, f, model)
    if near is not None and near[0] <= threshold:
        return False, near[0]
    head = inference_head(model)
    proj = s.projections(head)
    s.features.append(f)
    s.provenance.append(tuple(int(v) for v in provenance))
    s._proj = np.vstack([proj, head.project(f[None])])
    return True, None if near is None else near[0]


@dataclass
class RegionStats:
    offered: int = 0
    inserted: int = 0
    gated_out: int = 0


@dataclass(eq=False)
class ExemplarModel:
    fingerprint: bytes
    grid: RegionGrid
    threshold: float
    sets: list
    stats: list = field(default_factory=list)

    def total(self) -> int:
        return sum(len(s) for s in self.sets)


def check_model_usable(model: SiameseModel, threshold: float = INSERT_THRESHOLD) -> float:
    p0 = model.p0()
    if p0 >= threshold:
        raise UnusableModelError(f"model maps identical patches to distance {p0:.4f} >= {threshold}")
    return p0


def build_exemplars(train: DatasetPartition, model: SiameseModel, grid: RegionGrid,
                    gate: MotionGateParams = MotionGateParams(), flow_params: FlowParams = FlowParams(),
                    threshold: float = INSERT_THRESHOLD, cache_dirs=None, exemplars: Optional[ExemplarModel] = None,
                    progress=None, threads: int = 1) -> ExemplarModel:
    """Offer every gated-in train patch, in sequence/frame/region order.

    Passing an existing ``exemplars`` model continues it (streaming update).
    """
    check_model_usable(model, threshold)
    head = inference_head(model)
    if exemplars is None:
        exemplars = ExemplarModel(head.fingerprint, grid, threshold,
                                  [ExemplarSet(r, head.fingerprint) for r in range(len(grid))],
                                  [RegionStats() for _ in range(len(grid))])
    elif exemplars.fingerprint != head.fingerprint:
        raise ModelMismatchError("existing exemplar model was built with a different model")
    for si, seq in enumerate(train.sequences):
        cdir = None if cache_dirs is None else cache_dirs[si]
        n_frames = max(0, len(seq) - 6)
        seen = np.zeros((n_frames, len(grid)), bool)
        for patches in _by_frame(sequence_patches(seq, grid, flow_params, gate, cache_dir=cdir, threads=threads)):
            feats = head.embed_raw(np.stack([p.data for p in patches]))
            for p, f in zip(patches, feats):
                seen[p.anchor_frame, p.region_id] = True
                st = exemplars.stats[p.region_id]
                st.offered += 1
                ok, _ = try_insert(exemplars.sets[p.region_id], f, model, threshold, (si, p.anchor_frame))
                st.inserted += ok
            if progress:
                progress(si, patches[0].anchor_frame, n_frames)
        for r, st in enumerate(exemplars.stats):
            st.gated_out += int((~seen[:, r]).sum())
    return exemplars


def _by_frame(patches, frames_per_batch: int = 8):
    batch, frames = [], set()
    for p in patches:
        if p.anchor_frame not in frames and len(frames) >= frames_per_batch:
            yield batch
            batch, frames = [], set()
        frames.add(p.anchor_frame)
        batch.append(p)
    if batch:
        yield batch


# ---------------------------------------------------------------- exemplar file


def exemplars_to_bytes(em: ExemplarModel) -> bytes:
    dim = next((len(s.features[0]) for s in em.sets if s.features), 0)
    parts = [EXEMPLAR_MAGIC, em.fingerprint, struct.pack("<6I", *em.grid.descriptor()),
             struct.pack("<dII", em.threshold, dim, len(em.sets))]
    rec = np.dtype([("f", "<f4", (dim,)), ("seq", "<u4"), ("frame", "<u4")])
    for s in em.sets:
        parts.append(struct.pack("<I", len(s)))
        if s.features:
            r = np.zeros(len(s), rec)
            r["f"] = np.stack(s.features)
            r["seq"], r["frame"] = zip(*s.provenance)
            parts.append(r.tobytes())
    return b"".join(parts)


def exemplars_from_bytes(data: bytes) -> ExemplarModel:
    if data[:5] != EXEMPLAR_MAGIC:
        raise DataFormatError("not a VADE1 exemplar file")
    try:
        fp = data[5:37]
        grid = grid_from_descriptor(struct.unpack_from("<6I", data, 37))
        threshold, dim, n_regions = struct.unpack_from("<dII", data, 61)
        pos = 77
        if n_regions != len(grid):
            raise DataFormatError("exemplar file region count does not match its grid")
        rec = np.dtype([("f", "<f4", (dim,)), ("seq", "<u4"), ("frame", "<u4")])
        sets = []
        for r in range(n_regions):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            s = ExemplarSet(r, fp)
            if n:
                arr = np.frombuffer(data, rec, count=n, offset=pos)
                pos += n * rec.itemsize
                s.features = [row.astype(np.float32) for row in arr["f"]]
                s.provenance = list(zip(arr["seq"].tolist(), arr["frame"].tolist()))
            sets.append(s)
    except (struct.error, ValueError) as exc:
        raise DataFormatError(f"corrupt exemplar file: {exc}") from None
    if pos != len(data):
        raise DataFormatError("trailing bytes in exemplar file")
    return ExemplarModel(fp, grid, threshold, sets, [RegionStats() for _ in sets])


def save_exemplars(em: ExemplarModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(exemplars_to_bytes(em))


def load_exemplars(path) -> ExemplarModel:
    with open(path, "rb") as fh:
        return exemplars_from_bytes(fh.read())
