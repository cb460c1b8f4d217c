import csv
import json

import numpy as np
import pytest
import yaml

from smplgait.cli import main, parse_input_size, parse_sweep
from smplgait.config import load_run_config
from smplgait.core import read_manifest
from smplgait.errors import ConfigError
from smplgait.evaluation import EmbeddingSet

TINY = {
    "preprocess": {"target_height": 32, "target_width": 24},
    "model": {"channels": [4, 4, 8, 8, 8, 8], "stn_hidden": [16, 16], "hpp_scales": [1, 2, 4, 8],
              "part_dim": 8},
    "train": {"ids_per_batch": 2, "samples_per_id": 2, "frames": 8, "epochs": 2, "decay_epochs": [1],
              "iters_per_epoch": 2, "checkpoint_every": 1},
    "synth": {"num_subjects": 4, "sequences_per_subject": 3, "frames_range": [25, 26],
              "views": [[0.0, 5.0], [90.0, 5.0]], "image_width_range": [60, 80],
              "image_height_range": [120, 140], "seed": 1},
}


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_config):
    """A synthetic dataset plus a 4-iteration checkpoint trained on it."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--config", tiny_config, "--out", str(root / "data")]) == 0
    assert main(["train", "--config", tiny_config, "--data", str(root / "data"),
                 "--out", str(root / "run"), "--eval"]) == 0
    return root


def test_parse_helpers():
    assert parse_sweep("10..50", int, 10) == [10, 20, 30, 40, 50]
    assert parse_sweep("10..30:5") == [10, 15, 20, 25, 30]
    assert parse_sweep("0.1..0.3", float, 0.1) == [0.1, 0.2, 0.3]
    assert parse_sweep("500,1000") == [500, 1000]
    assert parse_input_size("88x128") == {"target_height": 128, "target_width": 88}
    with pytest.raises(ConfigError):
        parse_sweep("50..10")
    with pytest.raises(ConfigError):
        parse_input_size("big")


def test_train_outputs(trained):
    run = trained / "run"
    rows = list(csv.DictReader(open(run / "train_log.csv")))
    assert len(rows) == 4
    assert (run / "checkpoint_final.pt").exists()
    summary = json.loads((run / "eval" / "summary.json").read_text())
    assert set(summary) >= {"rank1", "rank5", "mAP", "mINP", "counts"}
    echoed = json.loads((run / "config.json").read_text())
    assert echoed["train"]["frames"] == 8 and echoed["model"]["part_dim"] == 8


def test_echoed_config_reproduces_run(trained, tmp_path):
    assert main(["train", "--config", str(trained / "run" / "config.json"), "--data", str(trained / "data"),
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "train_log.csv").read_text() == (trained / "run" / "train_log.csv").read_text()


def test_evaluate_checkpoint_without_config(trained, tmp_path):
    data = str(trained / "data")
    code = main(["evaluate", "--checkpoint", str(trained / "run" / "checkpoint_final.pt"),
                 "--query", data, "--gallery", data, "--out", str(tmp_path)])
    assert code == 0
    ours = json.loads((tmp_path / "summary.json").read_text())
    theirs = json.loads((trained / "run" / "eval" / "summary.json").read_text())
    assert ours == theirs


def test_embed_then_evaluate_matches(trained, tmp_path):
    ckpt = str(trained / "run" / "checkpoint_final.pt")
    data = str(trained / "data")
    for split in ("query", "gallery"):
        assert main(["embed", "--checkpoint", ckpt, "--manifest", data, "--split", split,
                     "--out", str(tmp_path / f"{split}.npz")]) == 0
    q = EmbeddingSet.load(tmp_path / "query.npz")
    assert q.embeddings.shape[1:] == (15, 8)
    assert main(["evaluate", "--query-embeddings", str(tmp_path / "query.npz"),
                 "--gallery-embeddings", str(tmp_path / "gallery.npz"), "--out", str(tmp_path / "ev")]) == 0
    direct = json.loads((trained / "run" / "eval" / "summary.json").read_text())
    assert json.loads((tmp_path / "ev" / "summary.json").read_text()) == direct


def test_test_frac_sweep_writes_csv(trained, tmp_path):
    data = str(trained / "data")
    code = main(["evaluate", "--checkpoint", str(trained / "run" / "checkpoint_final.pt"), "--query", data,
                 "--out", str(tmp_path), "--test-frac", "0.5..1.0:0.5"])
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
    assert [float(r["value"]) for r in rows] == [0.5, 1.0]
    assert all((tmp_path / d / "summary.json").exists() for d in ("frac_0.50", "frac_1.00"))


def test_emit_plots_single_run(trained, tmp_path):
    data = str(trained / "data")
    assert main(["evaluate", "--checkpoint", str(trained / "run" / "checkpoint_final.pt"), "--query", data,
                 "--out", str(tmp_path), "--emit-plots"]) == 0
    assert len(list(csv.DictReader(open(tmp_path / "sweep.csv")))) == 1


def test_frames_and_ids_sweeps(trained, tiny_config, tmp_path):
    data = str(trained / "data")
    assert main(["train", "--config", tiny_config, "--data", data, "--out", str(tmp_path / "f"),
                 "--frames", "8..16:8", "--set", "train.epochs=1", "--set", "train.decay_epochs=[]"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "f" / "sweep.csv")))
    assert [(r["parameter"], r["value"]) for r in rows] == [("frames", "8"), ("frames", "16")]
    assert main(["train", "--config", tiny_config, "--data", data, "--out", str(tmp_path / "i"),
                 "--ids", "2", "--set", "train.epochs=1", "--set", "train.decay_epochs=[]"]) == 0
    assert (tmp_path / "i" / "ids_00002" / "config.json").exists()
    assert main(["train", "--config", tiny_config, "--data", data, "--out", str(tmp_path / "x"),
                 "--ids", "99"]) == 2


def test_ablation_checkpoint_has_no_transform(trained, tiny_config, tmp_path):
    from smplgait.model import load_checkpoint
    assert main(["train", "--config", tiny_config, "--data", str(trained / "data"), "--out", str(tmp_path),
                 "--ablation", "no3d", "--set", "train.max_iters=1"]) == 0
    model, _ = load_checkpoint(tmp_path / "checkpoint_final.pt")
    assert model.stn is None


def test_resume_via_cli(trained, tiny_config, tmp_path):
    data = str(trained / "data")
    assert main(["train", "--config", tiny_config, "--data", data, "--out", str(tmp_path),
                 "--set", "train.max_iters=2"]) == 0
    assert main(["train", "--config", tiny_config, "--data", data, "--out", str(tmp_path),
                 "--resume", str(tmp_path / "checkpoint_final.pt")]) == 0
    assert (tmp_path / "train_log.csv").read_text() == (trained / "run" / "train_log.csv").read_text()


def test_confounded_synth(tiny_config, tmp_path):
    assert main(["synth", "--config", tiny_config, "--out", str(tmp_path), "--confounded",
                 "--set", "synth.num_subjects=6"]) == 0
    m = read_manifest(tmp_path)
    assert {e.camera_id for e in m.select(split="query").sequences} == {0}
    assert {e.camera_id for e in m.select(split="gallery").sequences} == {1}
    assert main(["synth", "--config", tiny_config, "--out", str(tmp_path / "one"), "--confounded",
                 "--set", "synth.views=[[0, 5]]"]) == 2


def test_validate_command(trained, tmp_path, capsys):
    assert main(["validate", str(trained / "data")]) == 0
    assert "0 problem(s)" in capsys.readouterr().out
    assert main(["validate", str(tmp_path / "nothing.json")]) == 3


def test_exit_codes(trained, tiny_config, tmp_path, capsys):
    data = str(trained / "data")
    assert main(["train", "--config", tiny_config, "--data", data, "--out", str(tmp_path),
                 "--set", "train.bogus=1"]) == 2
    assert "bogus" in capsys.readouterr().err
    assert main(["evaluate", "--checkpoint", str(tmp_path / "nope.pt"), "--query", data,
                 "--out", str(tmp_path / "e")]) == 3
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "t")]) == 3


def test_unwritable_output(tiny_config, tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["synth", "--config", tiny_config, "--out", str(blocker / "sub")]) == 3
    assert str(blocker / "sub") in capsys.readouterr().err


def test_empty_manifest(trained, tmp_path):
    doc = json.loads((trained / "data" / "manifest.json").read_text())
    doc["sequences"] = []
    doc["root"] = str(trained / "data")
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "run")]) == 3


def test_environment_override(tiny_config, monkeypatch):
    monkeypatch.setenv("SMPLGAIT_TRAIN__LR", "0.01")
    assert load_run_config(tiny_config).train.lr == 0.01
    cfg = load_run_config(tiny_config, {"train": {"lr": 0.5}})
    assert cfg.train.lr == 0.5
    monkeypatch.setenv("SMPLGAIT_TRAIN__NOPE", "1")
    with pytest.raises(ConfigError):
        load_run_config(tiny_config)


def test_input_size_flag(tiny_config):
    from smplgait.cli import build_parser, resolve_config
    args = build_parser().parse_args(["synth", "--config", tiny_config, "--out", "x", "--input-size", "24x32"])
    cfg = resolve_config(args)
    assert cfg.preprocess.size == (32, 24) and cfg.model.input_size == (32, 24)
    assert np.prod(cfg.model.feature_hw) == 48
