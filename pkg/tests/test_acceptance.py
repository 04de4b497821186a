"""Acceptance criteria, one test per criterion, each recording a pass/fail line."""

import json
import time

import numpy as np
import pytest

from siamese_vad.cli import main, sha256_file
from siamese_vad.evaluation import (detection_sweep, frame_level_roc, pixel_level_roc, region_based_roc,
                                    sweep_thresholds, track_based_roc)
from siamese_vad.exemplars import ExemplarSet, build_exemplars, nearest_exemplar
from siamese_vad.flow import estimate_flow
from siamese_vad.pairs import nn_over_train
from siamese_vad.patches import MotionGateParams, motion_gate, sequence_patches
from siamese_vad.siamese import Architecture, backward, embed, forward, init_model, loss, pair_distance
from siamese_vad.training import preprocess

from test_evaluation import (envelope_oracle, gt_from_masks, mann_whitney, pixel_oracle, random_fixture,
                             region_oracle, sweep_oracle, trapezoid)
from test_exemplars import candidates, loop_build, looped, oracle_distance  # noqa: F401 (fixture)
from test_flow import textured
from test_pairs import l1_oracle, rand_patch
from test_patches import _patch_with_motion
from test_siamese import _fd_check, grad_setup  # noqa: F401 (fixture)


def test_criterion_1_gradient_oracle(grad_setup, report):
    t0 = time.perf_counter()
    model, x1, x2, y = grad_setup
    res = forward(model, x1, x2, "train")
    grads, _ = backward(model, res, y)
    err, _ = _fd_check(model, x1, x2, y, grads, model.params)
    secs = time.perf_counter() - t0
    ok = err < 1e-4 and secs < 120
    report(1, ok, f"max relative error {err:.2e}, {secs:.1f}s")
    assert ok


def test_criterion_2_loss_table(report):
    table = [(0, 0.5, 0.2, 0.0, 0.693147), (1, 0.5, 0.2, 0.0, 0.138629), (1, 0.9, 0.2, 0.1, 0.2492234021178133)]
    errs = [abs(loss(np.array([p]), np.array([y]), g, e) - v) for y, p, g, e, v in table]
    ok = max(errs) < 1e-6
    report(2, ok, f"max abs error {max(errs):.1e}")
    assert ok


def test_criterion_3_zero_difference_constancy(report):
    model = init_model(Architecture(), seed=11)
    x = np.random.default_rng(0).uniform(-1, 1, (100, 20, 20, 13))
    p = pair_distance(model, x, x)
    spread = float(p.max() - p.min())
    ok = spread < 1e-9
    report(3, ok, f"p0 {p[0]:.6f}, spread {spread:.1e}")
    assert ok


def test_criterion_4_roc_oracles(report):
    rng = np.random.default_rng(7)
    errs = []
    # frame: 300 random frames
    scores = np.round(rng.random(300), 2)
    labels = rng.random(300) < 0.3
    masks = np.zeros((300, 2, 2), bool)
    masks[labels, 0, 0] = True
    gt = gt_from_masks(masks)
    c = frame_level_roc(scores, gt)
    errs.append(abs(c.auc - trapezoid(sweep_oracle(scores.tolist(), labels.tolist()))))
    errs.append(abs(c.auc - mann_whitney(scores.tolist(), labels.tolist())))
    rank_ok = frame_level_roc(np.exp(2 * scores) + 1, gt).auc == c.auc
    # pixel: 50 frames
    pm = np.zeros((50, 8, 8), bool)
    for t in range(0, 50, 2):
        yy, xx = rng.integers(0, 5, 2)
        pm[t, yy:yy + 3, xx:xx + 3] = True
    ps = np.round(rng.random(pm.shape) * 0.6 + pm * rng.random(pm.shape) * 0.5, 2)
    errs.append(abs(pixel_level_roc(ps, gt_from_masks(pm)).auc - pixel_oracle(ps, pm)))
    # region and track: hand-built fixtures against enumeration
    counts_ok = True
    for _ in range(3):
        m, boxes, s = random_fixture(rng)
        g = gt_from_masks(m, boxes)
        thr = sweep_thresholds(s)
        sw = detection_sweep(s, g, thresholds=thr)
        oracle = region_oracle(s, g, thr)
        for i, (hit, fp) in enumerate(oracle, start=1):
            counts_ok &= set(np.nonzero(sw.matched[i])[0].tolist()) == hit and sw.false_positives[i] == fp
        pts = [(0.0, 0.0)] + [(fp / g.n_frames, len(hit) / len(g.regions)) for hit, fp in oracle]
        errs.append(abs(region_based_roc(sw, g).auc - trapezoid(envelope_oracle(pts))))
        tpts = [(0.0, 0.0)]
        for hit, fp in oracle:
            n_hit = sum(sum(1 for j in idx if j in hit) * 10 >= len(idx) for idx in g.tracks.values())
            tpts.append((fp / g.n_frames, n_hit / len(g.tracks)))
        errs.append(abs(track_based_roc(sw, g).auc - trapezoid(envelope_oracle(tpts))))
        mono = detection_sweep(s ** 3 + 2, g, thresholds=[t ** 3 + 2 for t in thr])
        rank_ok &= np.array_equal(mono.matched, sw.matched) and np.array_equal(mono.false_positives,
                                                                                sw.false_positives)
    ok = max(errs) < 1e-9 and counts_ok and rank_ok
    report(4, ok, f"max AUC error {max(errs):.1e}, counts exact {counts_ok}, rank invariant {rank_ok}")
    assert ok


def test_criterion_5_nn_and_exemplar_oracles(loop_build, report):
    rng = np.random.default_rng(21)
    model, grid, once = loop_build
    # nearest exemplar vs linear re-scan on 100 elements
    s = ExemplarSet(0, model.fingerprint())
    pool = candidates(rng, 100, n_bases=10)
    s.features = list(pool)
    nn_ok = True
    for q in candidates(rng, 5, n_bases=10):
        ds = [oracle_distance(model, q, e) for e in pool]
        d, i = nearest_exemplar(s, q, model)
        nn_ok &= i == int(np.argmin(ds)) and abs(d - min(ds)) < 1e-9
    # nn_over_train vs linear re-scan on 100 elements
    train = [rand_patch(rng) for _ in range(100)]
    for _ in range(3):
        q = rand_patch(rng)
        ds = [l1_oracle(q, t) for t in train]
        i, d = nn_over_train(q, train)
        nn_ok &= i == int(np.argmin(ds)) and abs(d - min(ds)) < 1e-9
    # greedy cover: every offered train patch lies within 0.3 of an exemplar
    worst = 0.0
    for p in sequence_patches(looped(1).sequences[0], grid):
        f = embed(model, preprocess(p.data))[0]
        worst = max(worst, min(oracle_distance(model, f, e) for e in once.sets[p.region_id].features))
    cover_ok = worst <= 0.3 + 1e-6
    ten = build_exemplars(looped(10), model, grid)
    counts_1, counts_10 = [len(x) for x in once.sets], [len(x) for x in ten.sets]
    loop_ok = counts_1 == counts_10
    ok = nn_ok and cover_ok and loop_ok
    report(5, ok, f"rescans agree {nn_ok}, worst cover distance {worst:.4f}, "
                  f"exemplars 1x {sum(counts_1)} vs 10x {sum(counts_10)}")
    assert ok


def test_criterion_6_motion_gate_boundary(report):
    gate = MotionGateParams()
    skip79 = not motion_gate(_patch_with_motion(79), gate)
    keep80 = motion_gate(_patch_with_motion(80), gate)
    ok = skip79 and keep80
    report(6, ok, f"79 skipped {skip79}, 80 kept {keep80}")
    assert ok


def test_criterion_7_flow_fixture(report):
    big = textured()
    f = estimate_flow(big[:, 4:52], big[:, 2:50])  # content moves right by 2 px
    inner = (slice(8, -8), slice(8, -8))
    err = float(np.mean(np.hypot(f.u[inner] - 2.0, f.v[inner])))
    z = estimate_flow(big, big)
    still = float(max(np.abs(z.u).max(), np.abs(z.v).max()))
    ok = err < 0.5 and still < 1e-6
    report(7, ok, f"mean displacement error {err:.3f} px, identical-frame flow {still:.1e}")
    assert ok


# ---------------------------------------------------------------- end to end

SEEDS = (0, 1, 2)
STEPS = 200
COMMANDS = ("synth", "curate", "train", "build-exemplars", "score", "evaluate")


def run_pipeline(out, seed):
    """Run the CLI chain; stops at the first failing command."""
    cfg = out.parent / f"demo_{seed}.ini"
    cfg.write_text(f"[pipeline]\nseed = {seed}\n\n[siamese_net]\nmax_iterations = {STEPS}\n")
    t0 = time.perf_counter()
    for c in COMMANDS:
        code = main([c, "--config", str(cfg), "--out", str(out)])
        if code:
            return {"out": out, "failed": f"{c} exited {code}", "secs": time.perf_counter() - t0}
    summary = json.loads((out / "eval" / "summary.json").read_text())
    auc = {c["criterion"]: c["auc"] for c in summary["criteria"]}
    return {"out": out, "failed": None, "secs": time.perf_counter() - t0,
            "frame_auc": auc.get("frame", 0.0), "track_tpr": summary.get("track_tpr_at_1fppf") or 0.0,
            "val_pauc": json.loads((out / "manifest.json").read_text())["commands"]["train"]["notes"]["best_partial_auc"]}


def passes(run):
    return not run["failed"] and run["frame_auc"] >= 0.85 and run["track_tpr"] >= 0.7 and run["secs"] < 900


@pytest.fixture(scope="module")
def end_to_end(tmp_path_factory):
    runs = {}
    for seed in SEEDS:
        runs[seed] = run_pipeline(tmp_path_factory.mktemp(f"e2e_{seed}") / "out", seed)
        if passes(runs[seed]):
            break
    return runs


def test_criterion_8_synthetic_end_to_end(end_to_end, report):
    lines = []
    for seed, r in end_to_end.items():
        if r["failed"]:
            lines.append(f"seed {seed}: {r['failed']}")
        else:
            lines.append(f"seed {seed}: frame AUC {r['frame_auc']:.4f}, track TPR@1FPPF {r['track_tpr']:.3f}, "
                         f"val pAUC {r['val_pauc']:.4f} (>0.24 {r['val_pauc'] > 0.24}), {r['secs']:.0f}s")
    ok = any(passes(r) for r in end_to_end.values())
    report(8, ok, "; ".join(lines))
    assert ok


def test_criterion_9_determinism(end_to_end, tmp_path, report):
    done = [(seed, r) for seed, r in end_to_end.items() if not r["failed"]]
    assert done, "no seed completed the pipeline"
    seed, first = next(((s, r) for s, r in done if passes(r)), done[0])
    out, again = first["out"], tmp_path / "out"
    run_pipeline(again, seed)
    names = ["model.vadm", "exemplars.vade"] + sorted(
        str(p.relative_to(out)) for p in (out / "scores").glob("*.vads"))
    same = {n: sha256_file(out / n) == sha256_file(again / n) for n in names}
    ok = all(same.values()) and len(names) > 2
    report(9, ok, f"seed {seed}: {sum(same.values())}/{len(names)} artifacts byte-identical")
    assert ok


@pytest.mark.skip(reason="needs UCSD Ped2 and the source pool on local disk; optional and non-gating")
def test_criterion_10_ped2_frame_auc():
    pass
