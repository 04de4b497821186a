import json

import numpy as np
import pytest

from siamese_vad.cli import main, sha256_file
from siamese_vad.config import PipelineConfig, load_config
from siamese_vad.errors import ConfigurationError
from siamese_vad.exemplars import build_exemplars, save_exemplars
from siamese_vad.flow import FlowParams
from siamese_vad.media import load_partition
from siamese_vad.pairs import CurationConfig
from siamese_vad.patches import MotionGateParams, build_grid
from siamese_vad.siamese import save_model
from siamese_vad.training import TrainConfig

from conftest import usable_model

MINI = """
[pipeline]
seed = 1
sources = 1

[synthetic]
width = 40
height = 40
n_train_frames = 20
n_test_frames = 30
source_train_frames = 20
source_test_frames = 30
anomalies = {anomalies}
"""


def write_cfg(tmp_path, text=None, anomalies="fast_mover:5:20"):
    path = tmp_path / "vad.ini"
    path.write_text(MINI.format(anomalies=anomalies) if text is None else text)
    return path


def run(cfg, out, *cmd):
    return main([*cmd, "--config", str(cfg), "--out", str(out)])


def test_defaults_match_module_constants():
    cfg = load_config()
    assert cfg.flow == FlowParams() and cfg.gate == MotionGateParams()
    assert cfg.exemplar_threshold == 0.3 and cfg.temporal_mode == "anchor"
    assert cfg.threads >= 1
    train_defaults = TrainConfig()
    assert (cfg.train.batch_size, cfg.train.max_iterations) == (train_defaults.batch_size, train_defaults.max_iterations)
    assert cfg.curation.pairs_per_class == CurationConfig().pairs_per_class
    spec = cfg.target_spec()
    assert (spec.width, spec.height, spec.n_train_frames, spec.n_test_frames) == (64, 64, 500, 300)
    assert load_config(seed=5).train.seed == load_config(seed=5).train.seed != cfg.train.seed


@pytest.mark.parametrize("text", [
    "[pipeline]\nbogus = 1\n",
    "[nowhere]\nx = 1\n",
    "[siamese_net]\nbatch_size = many\n",
    "[anomaly_scoring]\ntemporal_mode = sideways\n",
    "[exemplar_model]\nthreshold = 1.5\n",
    "[media_ingest]\nsource_roots = a;b\nsource_transforms = 0.5\n",
])
def test_bad_config_exits_2(tmp_path, capsys, text):
    assert run(write_cfg(tmp_path, text), tmp_path / "out", "synth") == 2
    assert capsys.readouterr().err.startswith("error:")


def test_missing_config_file(tmp_path):
    assert main(["synth", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path)]) == 2
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "nope.ini")


def test_negative_seed_and_threads(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "-1"]) == 2
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o"), "--threads", "0"]) == 2


def test_synth_is_deterministic_and_writes_manifest(tmp_path):
    cfg = write_cfg(tmp_path)
    assert run(cfg, tmp_path / "a", "synth") == 0
    assert run(cfg, tmp_path / "b", "synth") == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a" / "data").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert sha256_file(tmp_path / "a" / f) == sha256_file(tmp_path / "b" / f)
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    entry = manifest["commands"]["synth"]
    assert set(entry) >= {"config", "inputs", "outputs", "wall_seconds"}
    assert entry["config"]["seed"] == 1
    te = load_partition(tmp_path / "a" / "data" / "target", "test")
    assert len(te.sequences[0]) == 30 and any(te.track_boxes.values())


def test_synth_without_anomalies_has_header_only_tracks(tmp_path):
    cfg = write_cfg(tmp_path, anomalies="")
    assert run(cfg, tmp_path / "o", "synth") == 0
    tracks = list((tmp_path / "o" / "data" / "target" / "test").rglob("tracks.csv"))
    assert tracks and all(t.read_text() == "track_id,frame,x,y,w,h\n" for t in tracks)


def test_curate_without_annotations_is_a_data_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path, anomalies="")
    out = tmp_path / "o"
    assert run(cfg, out, "synth") == 0
    assert run(cfg, out, "curate") == 3
    assert "error:" in capsys.readouterr().err


def test_missing_artifacts_exit_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "o"
    assert run(cfg, out, "train") == 2
    assert run(cfg, out, "synth") == 0
    assert run(cfg, out, "evaluate") == 2
    assert "score volume" in capsys.readouterr().err


def test_fingerprint_mismatch_exit_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "o"
    assert run(cfg, out, "synth") == 0
    tr = load_partition(out / "data" / "target", "train")
    em = build_exemplars(tr, usable_model(seed=1), build_grid(40, 40))
    save_exemplars(em, out / "exemplars.vade")
    save_model(usable_model(seed=2), out / "model.vadm")
    capsys.readouterr()
    assert run(cfg, out, "score") == 2
    err = capsys.readouterr().err
    assert "exemplars.vade" in err and "model.vadm" in err


def test_score_and_evaluate_chain(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "o"
    assert run(cfg, out, "synth") == 0
    model = usable_model(bias=1.2)
    tr = load_partition(out / "data" / "target", "train")
    save_model(model, out / "model.vadm")
    save_exemplars(build_exemplars(tr, model, build_grid(40, 40)), out / "exemplars.vade")
    assert run(cfg, out, "score") == 0
    first = sha256_file(next((out / "scores").glob("*.vads")))
    assert run(cfg, out, "score") == 0
    assert sha256_file(next((out / "scores").glob("*.vads"))) == first
    assert run(cfg, out, "evaluate") == 0
    summary = json.loads((out / "eval" / "summary.json").read_text())
    assert "frame" in json.dumps(summary)
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["commands"]) == {"synth", "score", "evaluate"}
    assert manifest["commands"]["evaluate"]["inputs"]


def test_pipeline_config_is_frozen():
    with pytest.raises(Exception):
        PipelineConfig().seed = 3
    assert np.isscalar(PipelineConfig().stage_seed("train"))
