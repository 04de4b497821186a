"""Frame sequences, dataset partitions and the on-disk dataset layout.

Layout::

    <root>/train/<seq>/frame_000000.png
    <root>/test/<seq>/frame_000000.png
    <root>/test/<seq>/mask_000000.png      (8-bit, nonzero = anomalous)
    <root>/test/<seq>/tracks.csv           (track_id,frame,x,y,w,h)
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataFormatError, InvalidInputError, InvalidTransformError, NotFoundError

LUMA = np.array([0.299, 0.587, 0.114])
TRACK_HEADER = ["track_id", "frame", "x", "y", "w", "h"]
_FRAME_RE = re.compile(r"^frame_(\d{6})\.png$")


@dataclass(frozen=True)
class TrackBox:
    track_id: int
    frame: int
    x: int
    y: int
    w: int
    h: int


@dataclass(frozen=True, eq=False)
class FrameSequence:
    """Grayscale frames stacked as a ``(n, height, width)`` float32 array."""

    frames: np.ndarray
    sequence_id: str
    fps_hint: Optional[float] = None

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 3 or frames.shape[0] < 1:
            raise InvalidInputError(f"sequence {self.sequence_id!r}: expected (n, h, w) frames, got {frames.shape}")
        if not np.all(np.isfinite(frames)) or frames.min() < 0 or frames.max() > 255:
            raise InvalidInputError(f"sequence {self.sequence_id!r}: intensities must lie in [0, 255]")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    def __len__(self):
        return self.frames.shape[0]


@dataclass(eq=False)
class DatasetPartition:
    role: str
    sequences: list[FrameSequence]
    pixel_masks: Optional[dict[str, np.ndarray]] = None
    track_boxes: Optional[dict[str, list[TrackBox]]] = None

    def __post_init__(self):
        if self.role not in ("train", "test"):
            raise InvalidInputError(f"unknown partition role {self.role!r}")
        if self.role == "train" and (self.pixel_masks or self.track_boxes):
            raise InvalidInputError("train partitions carry no anomaly annotations")
        by_id = {s.sequence_id: s for s in self.sequences}
        for sid, masks in (self.pixel_masks or {}).items():
            seq = by_id.get(sid)
            if seq is None or masks.shape != seq.frames.shape:
                raise DataFormatError(f"masks for {sid!r} do not match its frames")
        for sid, boxes in (self.track_boxes or {}).items():
            _check_tracks(boxes, len(by_id[sid]) if sid in by_id else 0, sid)

    def sequence(self, sequence_id: str) -> FrameSequence:
        for s in self.sequences:
            if s.sequence_id == sequence_id:
                return s
        raise KeyError(sequence_id)

    def masks_for(self, sequence_id: str) -> Optional[np.ndarray]:
        return (self.pixel_masks or {}).get(sequence_id)

    def tracks_for(self, sequence_id: str) -> list[TrackBox]:
        return (self.track_boxes or {}).get(sequence_id, [])


@dataclass(frozen=True)
class IngestTransform:
    scale_factor: float = 1.0
    rotation_degrees: float = 0.0

    def __post_init__(self):
        if not self.scale_factor > 0:
            raise InvalidTransformError(f"scale_factor must be positive, got {self.scale_factor}")

    @property
    def is_identity(self) -> bool:
        return self.scale_factor == 1.0 and self.rotation_degrees % 360 == 0


def _check_tracks(boxes, n_frames, sid):
    last = {}
    for b in boxes:
        if b.frame < 0 or b.frame >= n_frames:
            raise DataFormatError(f"{sid}: track {b.track_id} references missing frame {b.frame}")
        if b.track_id in last and b.frame <= last[b.track_id]:
            raise DataFormatError(f"{sid}: track {b.track_id} frames are not strictly increasing")
        last[b.track_id] = b.frame


def to_gray(img: np.ndarray) -> np.ndarray:
    """Luma conversion for RGB(A) input; grayscale passes through."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img[..., :3] @ LUMA
    return np.clip(img, 0, 255).astype(np.float32)


def read_frame(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "RGBA", "I;16", "I", "F"):
            im = im.convert("RGB")
        return to_gray(np.asarray(im))


def write_frame(path, frame: np.ndarray) -> None:
    Image.fromarray(np.clip(np.rint(frame), 0, 255).astype(np.uint8), mode="L").save(path, optimize=False)


def read_tracks(path) -> list[TrackBox]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != TRACK_HEADER:
            raise DataFormatError(f"{path}: expected header {','.join(TRACK_HEADER)}")
        try:
            return [TrackBox(*(int(float(v)) for v in row)) for row in reader if row]
        except (TypeError, ValueError) as exc:
            raise DataFormatError(f"{path}: {exc}") from None


def write_tracks(path, boxes) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACK_HEADER)
        for b in boxes:
            w.writerow([b.track_id, b.frame, b.x, b.y, b.w, b.h])


def _frame_files(seq_dir: Path) -> list[Path]:
    files = sorted(p for p in seq_dir.iterdir() if _FRAME_RE.match(p.name))
    for i, p in enumerate(files):
        if int(_FRAME_RE.match(p.name).group(1)) != i:
            raise DataFormatError(f"{seq_dir}: frame numbering has a gap at {p.name}")
    return files


def load_partition(root, role: str) -> DatasetPartition:
    if role not in ("train", "test"):
        raise InvalidInputError(f"unknown partition role {role!r}")
    base = Path(root) / role
    if not base.is_dir():
        raise NotFoundError(f"no {role} partition under {root}")
    sequences, masks, tracks = [], {}, {}
    for seq_dir in sorted(p for p in base.iterdir() if p.is_dir()):
        files = _frame_files(seq_dir)
        if not files:
            continue
        seq = FrameSequence(np.stack([read_frame(f) for f in files]), seq_dir.name)
        sequences.append(seq)
        if role != "test":
            continue
        mask_files = [seq_dir / f"mask_{i:06d}.png" for i in range(len(files))]
        present = [m.exists() for m in mask_files]
        if all(present):
            m = []
            for f in mask_files:
                with Image.open(f) as im:
                    m.append(np.asarray(im.convert("L")) > 0)
            m = np.stack(m)
            if m.shape != seq.frames.shape:
                raise DataFormatError(f"{seq_dir}: mask dimensions differ from frame dimensions")
            masks[seq.sequence_id] = m
        elif any(present):
            raise DataFormatError(f"{seq_dir}: masks exist for only some frames")
        if (seq_dir / "tracks.csv").exists():
            tracks[seq.sequence_id] = read_tracks(seq_dir / "tracks.csv")
    if not sequences:
        raise NotFoundError(f"{base} contains no frame sequences")
    return DatasetPartition(role, sequences, masks or None, tracks or None)


def save_partition(part: DatasetPartition, root) -> None:
    base = Path(root) / part.role
    for seq in part.sequences:
        d = base / seq.sequence_id
        d.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(seq.frames):
            write_frame(d / f"frame_{i:06d}.png", frame)
        if part.role != "test":
            continue
        masks = part.masks_for(seq.sequence_id)
        if masks is not None:
            for i, m in enumerate(masks):
                Image.fromarray(np.where(m, 255, 0).astype(np.uint8), mode="L").save(d / f"mask_{i:06d}.png")
        if part.track_boxes is not None:
            write_tracks(d / "tracks.csv", part.tracks_for(seq.sequence_id))


def load_dataset(root) -> tuple[DatasetPartition, DatasetPartition]:
    return load_partition(root, "train"), load_partition(root, "test")


# ---------------------------------------------------------------- transforms


def _scaled_shape(h, w, s):
    nh, nw = int(round(h * s)), int(round(w * s))
    if nh < 1 or nw < 1:
        raise InvalidTransformError(f"scale {s} collapses a {w}x{h} frame")
    return nh, nw


def _transform_plane(img, t: IngestTransform, order=1):
    out = np.asarray(img, dtype=np.float64)
    if t.scale_factor != 1.0:
        nh, nw = _scaled_shape(*out.shape, t.scale_factor)
        out = ndimage.zoom(out, (nh / out.shape[0], nw / out.shape[1]), order=order,
                           mode="nearest", grid_mode=True)
    if t.rotation_degrees % 360 != 0:
        out = ndimage.rotate(out, t.rotation_degrees, reshape=True, order=order, mode="constant", cval=0.0)
    return out


def apply_transform(seq: FrameSequence, t: IngestTransform) -> FrameSequence:
    """Bilinear scale, then rotate about the center with zero padding."""
    if t.is_identity:
        return seq
    frames = np.stack([np.clip(_transform_plane(f, t), 0, 255) for f in seq.frames])
    return FrameSequence(frames, seq.sequence_id, seq.fps_hint)


def _transform_box(b: TrackBox, t: IngestTransform, in_shape, out_shape) -> Optional[TrackBox]:
    s = t.scale_factor
    corners = np.array([[b.x, b.y], [b.x + b.w, b.y], [b.x, b.y + b.h], [b.x + b.w, b.y + b.h]], float) * s
    if t.rotation_degrees % 360 != 0:
        h, w = in_shape[0] * s, in_shape[1] * s
        a = np.deg2rad(t.rotation_degrees)
        c = corners - [w / 2, h / 2]
        # image y points down, so a counter-clockwise rotation on screen flips the sign of sin
        rot = np.array([[np.cos(a), np.sin(a)], [-np.sin(a), np.cos(a)]])
        corners = c @ rot.T + [out_shape[1] / 2, out_shape[0] / 2]
    x0, y0 = np.floor(corners.min(0)).astype(int)
    x1, y1 = np.ceil(corners.max(0)).astype(int)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, out_shape[1]), min(y1, out_shape[0])
    if x1 <= x0 or y1 <= y0:
        return None
    return TrackBox(b.track_id, b.frame, int(x0), int(y0), int(x1 - x0), int(y1 - y0))


def transform_partition(part: DatasetPartition, t: IngestTransform) -> DatasetPartition:
    """Apply ``t`` to frames, masks and track boxes of a whole partition."""
    if t.is_identity:
        return part
    seqs = [apply_transform(s, t) for s in part.sequences]
    masks = None
    if part.pixel_masks:
        masks = {sid: np.stack([_transform_plane(m.astype(float), t) >= 0.5 for m in ms])
                 for sid, ms in part.pixel_masks.items()}
    tracks = None
    if part.track_boxes is not None:
        tracks = {}
        for seq, new in zip(part.sequences, seqs):
            boxes = [_transform_box(b, t, seq.frames.shape[1:], new.frames.shape[1:])
                     for b in part.tracks_for(seq.sequence_id)]
            tracks[seq.sequence_id] = [b for b in boxes if b is not None]
    return DatasetPartition(part.role, seqs, masks, tracks)
