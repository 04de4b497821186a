"""Pipeline configuration: one INI file with a section per stage.

Every key is optional; missing keys fall back to the defaults of the
owning module's parameter dataclass. Example::

    [pipeline]
    seed = 0
    sources = 2

    [siamese_net]
    max_iterations = 300
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError, InvalidInputError, InvalidSpecError
from .flow import FlowParams
from .media import IngestTransform
from .pairs import CurationConfig
from .patches import MotionGateParams
from .synthetic import DEMO_ANOMALIES, AnomalyInjection, SyntheticSceneSpec
from .training import TrainConfig

SECTIONS = ("pipeline", "media_ingest", "synthetic", "flow_features", "patch_grid", "pair_curation",
            "siamese_net", "exemplar_model", "anomaly_scoring", "evaluation", "report")


@dataclass(frozen=True)
class SyntheticSettings:
    width: int = 64
    height: int = 64
    n_train_frames: int = 500
    n_test_frames: int = 300
    n_walkers: int = 3
    anomalies: tuple = DEMO_ANOMALIES
    source_train_frames: int = 200
    source_test_frames: int = 300


@dataclass(frozen=True)
class SourceEntry:
    root: Path
    transform: IngestTransform = IngestTransform()


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    threads: int = field(default_factory=lambda: os.cpu_count() or 1)
    target: Optional[Path] = None  # None: synthetic target under <out>/data/target
    sources: tuple = ()  # SourceEntry; empty: synthetic sources under <out>/data/source_k
    n_synthetic_sources: int = 2
    synthetic: SyntheticSettings = SyntheticSettings()
    flow: FlowParams = FlowParams()
    gate: MotionGateParams = MotionGateParams()
    curation: CurationConfig = CurationConfig()
    train: TrainConfig = TrainConfig()
    exemplar_threshold: float = 0.3
    temporal_mode: str = "anchor"
    coverage_min: float = 0.4
    max_thresholds: int = 200
    top_k: int = 16
    error_floor: float = 0.5
    overlays: int = 6
    raw: dict = field(default_factory=dict, compare=False)

    # seeds for each stage, all derived from the global seed
    def stage_seed(self, stage: str) -> int:
        names = ("target", "curation", "train") + tuple(f"source_{k}" for k in range(64))
        ss = np.random.SeedSequence(self.seed).spawn(len(names))[names.index(stage)]
        return int(ss.generate_state(1)[0])

    def target_spec(self) -> SyntheticSceneSpec:
        s = self.synthetic
        return SyntheticSceneSpec(width=s.width, height=s.height, n_train_frames=s.n_train_frames,
                                  n_test_frames=s.n_test_frames, n_walkers=s.n_walkers,
                                  anomalies=s.anomalies, seed=self.stage_seed("target"))

    def source_spec(self, k: int) -> SyntheticSceneSpec:
        s = self.synthetic
        return SyntheticSceneSpec(width=s.width, height=s.height, n_train_frames=s.source_train_frames,
                                  n_test_frames=s.source_test_frames, n_walkers=s.n_walkers,
                                  anomalies=_fit_anomalies(s.anomalies, s.source_test_frames),
                                  seed=self.stage_seed(f"source_{k}"))

    def snapshot(self) -> dict:
        def conv(v):
            if dataclasses.is_dataclass(v):
                return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v) if f.name != "raw"}
            if isinstance(v, (tuple, list)):
                return [conv(x) for x in v]
            if isinstance(v, Path):
                return str(v)
            return v
        return conv(self)


def _fit_anomalies(anomalies, n_frames):
    out = []
    for a in anomalies:
        if a.start < n_frames:
            out.append(dataclasses.replace(a, end=min(a.end, n_frames - 1)))
    return tuple(out)


def parse_anomalies(text: str) -> tuple:
    """``kind:start:end[:speed_or_size]`` entries separated by commas."""
    out = []
    for item in filter(None, (t.strip() for t in text.split(","))):
        parts = item.split(":")
        if len(parts) not in (3, 4):
            raise ConfigurationError(f"bad anomaly entry {item!r}; expected kind:start:end[:value]")
        kind, start, end = parts[0], int(parts[1]), int(parts[2])
        kw = {}
        if len(parts) == 4:
            kw["size_factor" if kind == "oversized" else "speed"] = float(parts[3])
        out.append(AnomalyInjection(kind, start, end, **kw))
    return tuple(out)


def parse_transform(text: str) -> IngestTransform:
    """``scale[,rotation_degrees]``."""
    parts = [p.strip() for p in text.split(",") if p.strip()]
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise ConfigurationError(f"bad transform {text!r}") from None
    if not 1 <= len(vals) <= 2:
        raise ConfigurationError(f"bad transform {text!r}")
    return IngestTransform(*vals)


def _coerce(value: str, default):
    if isinstance(default, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(float(v) for v in value.split(","))
    return value.strip()


def _fill(cls, section, base, skip=()):
    kw = {}
    for f in dataclasses.fields(cls):
        if f.name in skip or f.name not in section:
            continue
        try:
            kw[f.name] = _coerce(section[f.name], getattr(base, f.name))
        except ValueError:
            raise ConfigurationError(f"[{section.name}] {f.name}: cannot parse {section[f.name]!r}") from None
    unknown = set(section) - {f.name for f in dataclasses.fields(cls)} - set(skip)
    return kw, unknown


def load_config(path=None, seed: Optional[int] = None, threads: Optional[int] = None) -> PipelineConfig:
    cp = configparser.ConfigParser(interpolation=None)
    base_dir = Path(".")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file {path} does not exist")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from None
        base_dir = path.parent
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigurationError(f"unknown config section [{name}]")
    for name in SECTIONS:
        if not cp.has_section(name):
            cp.add_section(name)
    sec = {name: cp[name] for name in SECTIONS}
    unknown = []

    try:
        p = sec["pipeline"]
        cfg_seed = int(p.get("seed", "0"))
        cfg_threads = int(p.get("threads", str(os.cpu_count() or 1)))
        n_sources = int(p.get("sources", "2"))
        unknown += [f"pipeline.{k}" for k in set(p) - {"seed", "threads", "sources"}]

        m = sec["media_ingest"]
        target = Path(base_dir, m["target"]) if "target" in m else None
        sources = []
        roots = [r.strip() for r in m.get("source_roots", "").split(";") if r.strip()]
        transforms = [t for t in m.get("source_transforms", "").split(";") if t.strip()]
        if transforms and len(transforms) != len(roots):
            raise ConfigurationError("[media_ingest] source_transforms needs one entry per source root")
        for i, r in enumerate(roots):
            t = parse_transform(transforms[i]) if transforms else IngestTransform()
            sources.append(SourceEntry(Path(base_dir, r), t))
        unknown += [f"media_ingest.{k}" for k in set(m) - {"target", "source_roots", "source_transforms"}]

        s = sec["synthetic"]
        kw, unk = _fill(SyntheticSettings, s, SyntheticSettings(), skip=("anomalies",))
        if "anomalies" in s:
            kw["anomalies"] = parse_anomalies(s["anomalies"])
        synthetic = SyntheticSettings(**kw)
        unknown += [f"synthetic.{k}" for k in unk]

        kw, unk = _fill(FlowParams, sec["flow_features"], FlowParams())
        flow = FlowParams(**kw)
        unknown += [f"flow_features.{k}" for k in unk]

        kw, unk = _fill(MotionGateParams, sec["patch_grid"], MotionGateParams())
        gate = MotionGateParams(**kw)
        unknown += [f"patch_grid.{k}" for k in unk]

        kw, unk = _fill(CurationConfig, sec["pair_curation"], CurationConfig(), skip=("seed",))
        curation_kw = kw
        unknown += [f"pair_curation.{k}" for k in unk]

        kw, unk = _fill(TrainConfig, sec["siamese_net"], TrainConfig(), skip=("seed",))
        train_kw = kw
        unknown += [f"siamese_net.{k}" for k in unk]

        e = sec["exemplar_model"]
        threshold = float(e.get("threshold", "0.3"))
        unknown += [f"exemplar_model.{k}" for k in set(e) - {"threshold"}]

        a = sec["anomaly_scoring"]
        temporal_mode = a.get("temporal_mode", "anchor").strip()
        if temporal_mode not in ("anchor", "spread"):
            raise ConfigurationError(f"[anomaly_scoring] temporal_mode must be anchor or spread, got {temporal_mode!r}")
        unknown += [f"anomaly_scoring.{k}" for k in set(a) - {"temporal_mode"}]

        v = sec["evaluation"]
        coverage_min = float(v.get("coverage_min", "0.4"))
        max_thresholds = int(v.get("max_thresholds", "200"))
        unknown += [f"evaluation.{k}" for k in set(v) - {"coverage_min", "max_thresholds"}]

        r = sec["report"]
        top_k = int(r.get("top_k", "16"))
        error_floor = float(r.get("error_floor", "0.5"))
        overlays = int(r.get("overlays", "6"))
        unknown += [f"report.{k}" for k in set(r) - {"top_k", "error_floor", "overlays"}]
    except ValueError as exc:
        raise ConfigurationError(f"bad config value: {exc}") from None
    except InvalidInputError as exc:
        raise ConfigurationError(str(exc)) from None
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")

    if seed is not None:
        cfg_seed = seed
    if threads is not None:
        cfg_threads = threads
    if cfg_threads < 1 or n_sources < 0 or max_thresholds < 2 or not 0 < coverage_min <= 1:
        raise ConfigurationError("threads >= 1, sources >= 0, max_thresholds >= 2 and coverage_min in (0, 1] required")
    if not 0 < threshold < 1:
        raise ConfigurationError("[exemplar_model] threshold must lie in (0, 1)")

    cfg = PipelineConfig(seed=cfg_seed, threads=cfg_threads, target=target, sources=tuple(sources),
                         n_synthetic_sources=n_sources, synthetic=synthetic, flow=flow, gate=gate,
                         exemplar_threshold=threshold, temporal_mode=temporal_mode, coverage_min=coverage_min,
                         max_thresholds=max_thresholds, top_k=top_k, error_floor=error_floor, overlays=overlays,
                         raw={n: dict(sec[n]) for n in SECTIONS})
    try:
        cfg = dataclasses.replace(
            cfg,
            curation=CurationConfig(**curation_kw, seed=cfg.stage_seed("curation")),
            train=TrainConfig(**train_kw, seed=cfg.stage_seed("train")),
        )
        cfg.target_spec().validate()
    except (InvalidInputError, InvalidSpecError) as exc:
        raise ConfigurationError(str(exc)) from None
    return cfg


def snapshot_json(cfg: PipelineConfig) -> str:
    return json.dumps(cfg.snapshot(), indent=2, sort_keys=True, default=str)
