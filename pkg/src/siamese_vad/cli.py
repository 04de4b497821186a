"""Command-line pipeline: synth, curate, train, build-exemplars, score, evaluate, report-errors.

Output layout under ``--out``::

    data/target, data/source_<k>     synthetic datasets (synth)
    pairs.vadp                       curated training pairs
    model.vadm                       trained Siamese model
    exemplars.vade                   region exemplar sets
    scores/<sequence>.vads           per-pixel score volumes (+ .csv frame scores)
    eval/                            ROC CSVs, summary.json, SVG plots, PNG overlays
    errors/                          large-error report
    manifest.json                    per command: config snapshot, input/output hashes, timings
    cache/flow/                      optical flow cache (keyed by frames and flow parameters)
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import PipelineConfig, load_config
from .errors import ConfigurationError, DataError, MissingArtifactError, NumericFailureError, VadError
from .evaluation import GroundTruth, evaluate
from .exemplars import build_exemplars, load_exemplars, save_exemplars
from .media import DatasetPartition, load_partition, save_partition, transform_partition
from .pairs import curate_pairs, load_pairs, save_pairs
from .patches import build_grid
from .plotting import plot_error_report, plot_frame_scores, plot_roc, render_overlay
from .scoring import (frame_scores, large_error_report, save_volume, load_volume, score_sequence,
                      threshold_detections, write_frame_scores_csv)
from .siamese import load_model, save_model
from .synthetic import generate_synthetic
from .training import train

log = logging.getLogger("siamese_vad")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(sha256_file(p).encode())
    return h.hexdigest()


class Run:
    """Shared state for one command invocation."""

    def __init__(self, cfg: PipelineConfig, out: Path, command: str):
        self.cfg, self.out, self.command = cfg, out, command
        self.inputs, self.outputs, self.notes = {}, {}, {}
        self.t0 = time.perf_counter()
        out.mkdir(parents=True, exist_ok=True)

    def need(self, path: Path, what: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(f"{what} not found at {path}; run the upstream command first")
        return path

    def record_input(self, name, path: Path):
        self.inputs[name] = _tree_hash(path) if path.is_dir() else sha256_file(path)

    def record_output(self, name, path: Path):
        self.outputs[name] = _tree_hash(path) if path.is_dir() else sha256_file(path)

    def flow_cache(self, *seqs) -> Path:
        h = hashlib.sha256(json.dumps(self.cfg.snapshot()["flow"], sort_keys=True).encode())
        for seq in seqs:
            h.update(seq.frames.tobytes())
        return self.out / "cache" / "flow" / h.hexdigest()[:20]

    def finish(self):
        path = self.out / "manifest.json"
        manifest = {}
        if path.exists():
            try:
                manifest = json.loads(path.read_text())
            except json.JSONDecodeError:
                manifest = {}
        manifest.setdefault("commands", {})[self.command] = {
            "version": __version__,
            "config": self.cfg.snapshot(),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "notes": self.notes,
            "wall_seconds": round(time.perf_counter() - self.t0, 3),
        }
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))


# ---------------------------------------------------------------- datasets


def target_root(run: Run) -> Path:
    return run.cfg.target if run.cfg.target is not None else run.out / "data" / "target"


def load_target(run: Run, role: str) -> DatasetPartition:
    root = run.need(target_root(run), "target dataset")
    run.record_input(f"target/{role}", root / role)
    return load_partition(root, role)


def load_sources(run: Run):
    if run.cfg.sources:
        entries = [(e.root, e.transform) for e in run.cfg.sources]
    else:
        entries = [(run.out / "data" / f"source_{k}", None) for k in range(run.cfg.n_synthetic_sources)]
    if not entries:
        raise ConfigurationError("no source datasets configured")
    out = []
    for root, t in entries:
        run.need(root, "source dataset")
        run.record_input(f"source/{root.name}", root)
        tr, te = load_partition(root, "train"), load_partition(root, "test")
        if t is not None and not t.is_identity:
            tr, te = transform_partition(tr, t), transform_partition(te, t)
        out.append((tr, te))
    return out


def _grid_for(part: DatasetPartition):
    widths = {(s.width, s.height) for s in part.sequences}
    if len(widths) != 1:
        raise DataError("all sequences of a dataset must share one frame size")
    w, h = widths.pop()
    return build_grid(w, h)


# ---------------------------------------------------------------- commands


def cmd_synth(run: Run):
    cfg = run.cfg
    specs = {"target": cfg.target_spec()}
    for k in range(cfg.n_synthetic_sources):
        specs[f"source_{k}"] = cfg.source_spec(k)
    for name, spec in specs.items():
        root = run.out / "data" / name
        tr, te = generate_synthetic(spec)
        save_partition(tr, root)
        save_partition(te, root)
        run.record_output(f"data/{name}", root)
        print(f"{name}: {len(tr.sequences)}x{spec.n_train_frames} train frames, "
              f"{len(te.sequences)}x{spec.n_test_frames} test frames, {len(spec.anomalies)} anomalies")


def cmd_curate(run: Run):
    cfg = run.cfg
    sources = load_sources(run)
    caches = [run.flow_cache(*tr.sequences, *te.sequences) for tr, te in sources]
    pairs = curate_pairs(sources, cfg.curation, cfg.flow, cfg.gate, cache_dirs=caches,
                         threads=cfg.threads)
    path = run.out / "pairs.vadp"
    save_pairs(pairs, path)
    run.record_output("pairs", path)
    n_sim, n_dis = pairs.class_counts()
    thr = {k: (None if v is None else {"mu": v.mu, "sigma": v.sigma, "value": v.value})
           for k, v in pairs.thresholds.items()}
    run.notes.update(similar=n_sim, dissimilar=n_dis, thresholds=thr)
    print(f"pairs: similar={n_sim} dissimilar={n_dis}")
    for k, v in thr.items():
        if v is not None:
            print(f"threshold {k}: mu={v['mu']:.6f} sigma={v['sigma']:.6f} value={v['value']:.6f}")


def cmd_train(run: Run):
    cfg = run.cfg
    path = run.need(run.out / "pairs.vadp", "pair dataset")
    run.record_input("pairs", path)
    pairs = load_pairs(path)
    t0 = time.perf_counter()

    def progress(step, value, score):
        log.info("step %d loss %.5f val_pauc %.5f (%.0fs)", step, value, score, time.perf_counter() - t0)

    result = train(pairs.x1, pairs.x2, pairs.y, cfg.train, progress=progress)
    out = run.out / "model.vadm"
    save_model(result.model, out)
    run.record_output("model", out)
    p0 = result.model.p0()
    run.notes.update(best_step=result.best_step, best_partial_auc=result.model.best_partial_auc, p0=p0)
    hist = run.out / "train_history.csv"
    with open(hist, "w") as fh:
        fh.write("step,loss,val_partial_auc\n")
        for step, value, score in result.history:
            fh.write(f"{step},{value:.9g},{score:.9g}\n")
    print(f"model: best step {result.best_step}, validation partial AUC {result.model.best_partial_auc:.5f}, p0 {p0:.5f}")


def _model_and_exemplars(run: Run):
    mpath = run.need(run.out / "model.vadm", "model")
    epath = run.need(run.out / "exemplars.vade", "exemplar file")
    run.record_input("model", mpath)
    run.record_input("exemplars", epath)
    model, em = load_model(mpath), load_exemplars(epath)
    if em.fingerprint != model.fingerprint():
        raise ConfigurationError(f"fingerprint chain broken: {epath.name} was built from a model other than {mpath.name}")
    return model, em


def cmd_build_exemplars(run: Run):
    cfg = run.cfg
    mpath = run.need(run.out / "model.vadm", "model")
    run.record_input("model", mpath)
    model = load_model(mpath)
    tr = load_target(run, "train")
    grid = _grid_for(tr)
    em = build_exemplars(tr, model, grid, cfg.gate, cfg.flow, cfg.exemplar_threshold,
                         cache_dirs=[run.flow_cache(s) for s in tr.sequences], threads=cfg.threads)
    out = run.out / "exemplars.vade"
    save_exemplars(em, out)
    run.record_output("exemplars", out)
    counts = [len(s) for s in em.sets]
    run.notes.update(total=em.total(), per_region=counts,
                     offered=[s.offered for s in em.stats], gated_out=[s.gated_out for s in em.stats])
    print(f"exemplars: {em.total()} over {len(counts)} regions (max {max(counts)}, empty {counts.count(0)})")


def cmd_score(run: Run):
    cfg = run.cfg
    model, em = _model_and_exemplars(run)
    te = load_target(run, "test")
    grid = _grid_for(te)
    if grid.descriptor() != em.grid.descriptor():
        raise ConfigurationError("fingerprint chain broken: test frames do not match the exemplar grid")
    sdir = run.out / "scores"
    sdir.mkdir(exist_ok=True)
    for seq in te.sequences:
        vol = score_sequence(seq, em, model, grid, cfg.gate, cfg.flow, cfg.temporal_mode,
                             cache_dir=run.flow_cache(seq), threads=cfg.threads)
        save_volume(vol, sdir / f"{seq.sequence_id}.vads")
        write_frame_scores_csv(sdir / f"{seq.sequence_id}.csv", frame_scores(vol))
        run.record_output(f"scores/{seq.sequence_id}", sdir / f"{seq.sequence_id}.vads")
        print(f"{seq.sequence_id}: {vol.n_frames} scored frames, max score {vol.scores.max():.4f}")


def _load_volumes(run: Run, te: DatasetPartition):
    vols = []
    for seq in te.sequences:
        p = run.need(run.out / "scores" / f"{seq.sequence_id}.vads", "score volume")
        run.record_input(f"scores/{seq.sequence_id}", p)
        vol = load_volume(p, seq.sequence_id)
        if vol.scores.shape[1:] != (seq.height, seq.width) or vol.n_frames != max(len(seq) - 6, 0):
            raise DataError(f"score volume for {seq.sequence_id} does not match the test sequence")
        vols.append(vol)
    return vols


def cmd_evaluate(run: Run):
    cfg = run.cfg
    te = load_target(run, "test")
    vols = _load_volumes(run, te)
    result = evaluate(vols, te, cfg.coverage_min, cfg.max_thresholds)
    edir = run.out / "eval"
    edir.mkdir(exist_ok=True)
    for name, curve in result.curves.items():
        curve.write_csv(edir / f"roc_{name}.csv")
        plot_roc(curve, edir / f"roc_{name}.svg")
    result.write_json(edir / "summary.json")
    run.record_output("summary", edir / "summary.json")

    gt = GroundTruth.from_partition(te)
    series = np.concatenate([frame_scores(v) for v in vols])
    positive = gt.masks.reshape(gt.n_frames, -1).any(axis=1) if gt.masks is not None else None
    plot_frame_scores(series, positive, edir / "frame_scores.svg")
    _overlays(run, te, vols, result, gt, edir)

    for c in result.curves.values():
        eer = "" if c.eer is None else f"\teer={c.eer:.4f}"
        print(f"{c.criterion}\tauc={c.auc:.4f}{eer}")
    for name, reason in result.skipped.items():
        print(f"{name}\tskipped: {reason}")
    if "track" in result.curves:
        print(f"track\ttpr@1fppf={result.curves['track'].tpr_at(1.0):.4f}")
    run.notes.update(result.summary())


def _overlays(run, te, vols, result, gt, edir):
    """PNG overlays at the track curve's best operating point within 1 FPPF (else the frame EER)."""
    n = run.cfg.overlays
    if n <= 0:
        return
    curve = result.curves.get("track") or result.curves.get("region") or result.curves.get("frame")
    if curve is None:
        return
    ok = np.isfinite(curve.thresholds) & (curve.x <= 1.0)
    tau = float(curve.thresholds[ok][np.argmax(curve.tpr[ok])]) if ok.any() else 1.0
    odir = edir / "overlays"
    odir.mkdir(exist_ok=True)
    frame_gt = [[] for _ in range(gt.n_frames)]
    for r in gt.regions:
        ys, xs = np.nonzero(r.mask)
        if ys.size:
            frame_gt[r.frame].append((int(xs.min()), int(ys.min()), int(np.ptp(xs)) + 1, int(np.ptp(ys)) + 1))
    offset = 0
    for seq, vol in zip(te.sequences, vols):
        masks, regions = threshold_detections(vol, tau)
        pos = [t for t in range(vol.n_frames) if frame_gt[offset + t]]
        picks = pos if pos else list(range(vol.n_frames))
        if picks:
            picks = [picks[int(i)] for i in np.linspace(0, len(picks) - 1, min(n, len(picks)))]
        for t in dict.fromkeys(picks):
            render_overlay(seq.frames[t], frame_gt[offset + t], [r.bbox for r in regions[t]], masks[t],
                           odir / f"{seq.sequence_id}_{t:06d}.png")
        offset += vol.n_frames
    run.notes["overlay_threshold"] = tau


def cmd_report_errors(run: Run):
    cfg = run.cfg
    ppath = run.need(run.out / "pairs.vadp", "pair dataset")
    mpath = run.need(run.out / "model.vadm", "model")
    run.record_input("pairs", ppath)
    run.record_input("model", mpath)
    pairs, model = load_pairs(ppath), load_model(mpath)
    report = large_error_report(pairs, model, cfg.top_k, cfg.error_floor)
    rdir = run.out / "errors"
    rdir.mkdir(exist_ok=True)
    with open(rdir / "large_errors.csv", "w") as fh:
        fh.write("rank,pair_index,label,p,error,provenance,flagged\n")
        for i, e in enumerate(report.entries):
            fh.write(f"{i},{e.index},{e.label},{e.p:.6f},{e.error:.6f},{e.provenance},{int(e.flagged)}\n")
    plot_error_report(report, pairs, rdir / "large_errors.png")
    run.notes.update(flagged=len(report.flagged), listed=len(report.entries))
    print(f"large errors: {len(report.flagged)} of top {len(report.entries)} above {cfg.error_floor}")


COMMANDS = {
    "synth": cmd_synth,
    "curate": cmd_curate,
    "train": cmd_train,
    "build-exemplars": cmd_build_exemplars,
    "score": cmd_score,
    "evaluate": cmd_evaluate,
    "report-errors": cmd_report_errors,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="siamese-vad", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", type=Path, help="INI configuration file")
    shared.add_argument("--out", type=Path, default=Path("vad_out"), help="output directory")
    shared.add_argument("--seed", type=int, help="global seed (overrides the config)")
    shared.add_argument("--threads", type=int, help="worker threads (default: CPU count)")
    shared.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[shared])
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigurationError("--seed must be nonnegative")
        cfg = load_config(args.config, seed=args.seed, threads=args.threads)
        run = Run(cfg, args.out, args.command)
        COMMANDS[args.command](run)
        run.finish()
    except VadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return NumericFailureError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
