"""Deterministic synthetic surveillance scenes.

Normal activity is a handful of walkers pacing back and forth along fixed
horizontal lanes. Test video may add injected anomalies (fast movers,
oversized sprites, walkers on a vertical trajectory) with pixel masks and
track boxes derived from the rendered sprite coverage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidSpecError
from .media import DatasetPartition, FrameSequence, TrackBox

ANOMALY_KINDS = ("fast_mover", "oversized", "novel_trajectory")


@dataclass(frozen=True)
class SpriteDef:
    shape: str = "rect"
    intensity: float = 200.0
    width: int = 6
    height: int = 10


@dataclass(frozen=True)
class AnomalyInjection:
    kind: str
    start: int
    end: int  # inclusive
    speed: float = 3.5
    size_factor: float = 2.0
    sequence: int = 0


@dataclass(frozen=True)
class SyntheticSceneSpec:
    width: int = 64
    height: int = 64
    n_train_frames: int = 500
    n_test_frames: int = 300
    n_train_sequences: int = 1
    n_test_sequences: int = 1
    n_walkers: int = 3
    sprites: tuple = (SpriteDef("rect", 200.0, 6, 10), SpriteDef("ellipse", 30.0, 6, 10))
    speed_range: tuple = (0.8, 1.2)
    anomalies: tuple = ()
    background_mean: float = 110.0
    background_contrast: float = 25.0
    noise_sigma: float = 1.0
    seed: int = 0

    def validate(self):
        if self.width < 1 or self.height < 1:
            raise InvalidSpecError("canvas must be non-empty")
        for sp in self.sprites:
            if sp.shape not in ("rect", "ellipse"):
                raise InvalidSpecError(f"unknown sprite shape {sp.shape!r}")
            if sp.width > self.width or sp.height > self.height or sp.width < 1 or sp.height < 1:
                raise InvalidSpecError(f"sprite {sp.width}x{sp.height} does not fit a {self.width}x{self.height} canvas")
        if not self.sprites:
            raise InvalidSpecError("at least one sprite definition is required")
        lo, hi = self.speed_range
        if not 0 <= lo <= hi:
            raise InvalidSpecError(f"bad speed range {self.speed_range}")
        for a in self.anomalies:
            if a.kind not in ANOMALY_KINDS:
                raise InvalidSpecError(f"unknown anomaly kind {a.kind!r}")
            if not 0 <= a.start <= a.end < self.n_test_frames:
                raise InvalidSpecError(f"anomaly span {a.start}..{a.end} outside the test video")
            if not 0 <= a.sequence < self.n_test_sequences:
                raise InvalidSpecError(f"anomaly targets missing test sequence {a.sequence}")
            w, h = _anomaly_size(self, a)
            if w > self.width or h > self.height:
                raise InvalidSpecError(f"{a.kind} sprite {w}x{h} does not fit the canvas")


def _anomaly_size(spec, a):
    sp = spec.sprites[0]
    if a.kind == "oversized":
        return int(round(sp.width * a.size_factor)), int(round(sp.height * a.size_factor))
    return sp.width, sp.height


def _coverage(shape, w, h, x, y, canvas_h, canvas_w):
    """Fractional pixel coverage of a sprite whose top-left corner is at (x, y)."""
    if shape == "rect":
        cols = np.arange(canvas_w)
        rows = np.arange(canvas_h)
        cx = np.clip(np.minimum(cols + 1, x + w) - np.maximum(cols, x), 0, 1)
        cy = np.clip(np.minimum(rows + 1, y + h) - np.maximum(rows, y), 0, 1)
        return np.outer(cy, cx)
    ss = 4
    sub = (np.arange(canvas_w * ss) + 0.5) / ss
    subr = (np.arange(canvas_h * ss) + 0.5) / ss
    dx = (sub - (x + w / 2)) / (w / 2)
    dy = (subr - (y + h / 2)) / (h / 2)
    inside = (dy[:, None] ** 2 + dx[None, :] ** 2) <= 1.0
    return inside.reshape(canvas_h, ss, canvas_w, ss).mean(axis=(1, 3))


def _reflect(pos, vel, lo, hi):
    if pos < lo:
        return 2 * lo - pos, -vel
    if pos > hi:
        return 2 * hi - pos, -vel
    return pos, vel


class _Walker:
    def __init__(self, sprite, x, y, vx, vy=0.0):
        self.sprite, self.x, self.y, self.vx, self.vy = sprite, x, y, vx, vy

    def step(self, W, H, w=None, h=None):
        w = self.sprite.width if w is None else w
        h = self.sprite.height if h is None else h
        self.x, self.vx = _reflect(self.x + self.vx, self.vx, 0.0, W - w)
        self.y, self.vy = _reflect(self.y + self.vy, self.vy, 0.0, H - h)


def _background(spec, rng):
    noise = ndimage.gaussian_filter(rng.standard_normal((spec.height, spec.width)), 2.0, mode="wrap")
    noise /= noise.std() + 1e-12
    return spec.background_mean + spec.background_contrast * noise


def _lanes(spec, rng):
    max_h = max(sp.height for sp in spec.sprites)
    return [float(rng.uniform(1, spec.height - max_h - 1)) for _ in range(spec.n_walkers)]


def _spawn_walkers(spec, lanes, rng):
    walkers = []
    for i, lane in enumerate(lanes):
        sp = spec.sprites[i % len(spec.sprites)]
        speed = rng.uniform(*spec.speed_range) * rng.choice([-1.0, 1.0])
        walkers.append(_Walker(sp, float(rng.uniform(0, spec.width - sp.width)), lane, float(speed)))
    return walkers


def _render(bg, walkers, spec, rng):
    img = bg.copy()
    for wk in walkers:
        cov = _coverage(wk.sprite.shape, wk.sprite.width, wk.sprite.height, wk.x, wk.y, spec.height, spec.width)
        img = img * (1 - cov) + wk.sprite.intensity * cov
    return img


def _finish(img, spec, rng):
    if spec.noise_sigma > 0:
        img = img + spec.noise_sigma * rng.standard_normal(img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.float32)


def _make_anomaly_walker(spec, a, lanes, rng):
    base = spec.sprites[0]
    w, h = _anomaly_size(spec, a)
    sp = SpriteDef(base.shape, base.intensity, w, h)
    if a.kind == "novel_trajectory":
        vy = rng.uniform(*spec.speed_range) * rng.choice([-1.0, 1.0])
        return _Walker(sp, float(rng.uniform(0, spec.width - w)), float(rng.uniform(0, spec.height - h)), 0.0, float(vy))
    speed = a.speed if a.kind == "fast_mover" else rng.uniform(*spec.speed_range)
    lane = min(lanes[int(rng.integers(len(lanes)))] if lanes else 0.0, spec.height - h)
    return _Walker(sp, float(rng.uniform(0, spec.width - w)), float(lane), float(speed * rng.choice([-1.0, 1.0])))


def _render_sequence(spec, bg, lanes, n_frames, rng, anomalies=()):
    walkers = _spawn_walkers(spec, lanes, rng)
    injected = [(a, _make_anomaly_walker(spec, a, lanes, rng)) for a in anomalies]
    frames = np.empty((n_frames, spec.height, spec.width), np.float32)
    masks = np.zeros(frames.shape, bool)
    boxes = []
    for t in range(n_frames):
        img = _render(bg, walkers, spec, rng)
        for track_id, (a, wk) in enumerate(injected, start=1):
            if not a.start <= t <= a.end:
                continue
            cov = _coverage(wk.sprite.shape, wk.sprite.width, wk.sprite.height, wk.x, wk.y, spec.height, spec.width)
            img = img * (1 - cov) + wk.sprite.intensity * cov
            m = cov >= 0.5
            masks[t] |= m
            ys, xs = np.nonzero(m)
            boxes.append(TrackBox(track_id, t, int(xs.min()), int(ys.min()),
                                  int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)))
        frames[t] = _finish(img, spec, rng)
        for wk in walkers:
            wk.step(spec.width, spec.height)
        for a, wk in injected:
            if a.start <= t <= a.end:
                wk.step(spec.width, spec.height)
    boxes.sort(key=lambda b: (b.track_id, b.frame))
    return frames, masks, boxes


def generate_synthetic(spec: SyntheticSceneSpec) -> tuple[DatasetPartition, DatasetPartition]:
    """Render ``(train, test)`` partitions; a pure function of ``spec``."""
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    scene_ss, train_ss, test_ss = root.spawn(3)
    scene_rng = np.random.default_rng(scene_ss)
    bg = _background(spec, scene_rng)
    lanes = _lanes(spec, scene_rng)

    train = []
    for i, ss in enumerate(train_ss.spawn(spec.n_train_sequences)):
        frames, _, _ = _render_sequence(spec, bg, lanes, spec.n_train_frames, np.random.default_rng(ss))
        train.append(FrameSequence(frames, f"train_{i:03d}"))

    test, masks, tracks = [], {}, {}
    for i, ss in enumerate(test_ss.spawn(spec.n_test_sequences)):
        mine = [a for a in spec.anomalies if a.sequence == i]
        frames, m, boxes = _render_sequence(spec, bg, lanes, spec.n_test_frames, np.random.default_rng(ss), mine)
        sid = f"test_{i:03d}"
        test.append(FrameSequence(frames, sid))
        masks[sid] = m
        tracks[sid] = boxes
    return DatasetPartition("train", train), DatasetPartition("test", test, masks, tracks)


DEMO_ANOMALIES = (
    AnomalyInjection("fast_mover", 40, 100, speed=3.5),
    AnomalyInjection("oversized", 160, 230, size_factor=2.0),
)


def demo_spec(seed: int = 0, **overrides) -> SyntheticSceneSpec:
    kw = dict(anomalies=DEMO_ANOMALIES, seed=seed)
    kw.update(overrides)
    return SyntheticSceneSpec(**kw)
