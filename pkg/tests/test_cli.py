"""End-to-end runs of the command-line surface against a miniature corpus:
synth -> train -> predict -> evaluate -> sweep, plus the exit-code contract."""

import json
import shutil

import pytest

from earshot.cli import main
from earshot.data import read_predictions_csv

SYNTH_CFG = """\
# miniature planted corpus
n_utterances = 12
t_range = 16,24
available_window = 12,15
planted_window = 12,15
seed = 0
"""

MODEL_CFG = """\
d_model = 16
n_heads = 2
ffn_mult = 2
dropout = 0.0
mscnn_channels = 12
layer_window = 12,15
backbones = synthetic
conditioning = categorical
readout = mean
use_reference = true
ear_pooling = best
"""

TRAIN_CFG = """\
lr = 0.001
weight_decay = 0.01
batch_size = 4
epochs = 1
seed = 0
"""

SWEEP_CFG = """\
window_size = 4
candidates = 12-15
readouts = mean
n_train = 9
"""


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Shared workspace: configs written, dataset synthesized, one full
    5-fold training run completed."""
    root = tmp_path_factory.mktemp("cli")
    for name, text in (("synth.cfg", SYNTH_CFG), ("model.cfg", MODEL_CFG),
                       ("train.cfg", TRAIN_CFG), ("sweep.cfg", SWEEP_CFG)):
        (root / name).write_text(text)
    assert main(["synth", "--config", str(root / "synth.cfg"),
                 "--out", str(root / "data")]) == 0
    assert main(["train", "--manifest", str(root / "data" / "manifest.json"),
                 "--model-config", str(root / "model.cfg"),
                 "--train-config", str(root / "train.cfg"),
                 "--out", str(root / "run")]) == 0
    return root


def test_synth_outputs(ws):
    doc = json.loads((ws / "data" / "manifest.json").read_text())
    assert doc["manifest_version"] == 1
    assert len(doc["utterances"]) == 12
    assert (ws / "data" / "listeners.json").exists()
    assert (ws / "data" / "features").is_dir()


def test_synth_seed_flag_overrides_config(ws, tmp_path):
    assert main(["synth", "--config", str(ws / "synth.cfg"), "--seed", "1",
                 "--out", str(tmp_path / "other")]) == 0
    a = (ws / "data" / "manifest.json").read_text()
    b = (tmp_path / "other" / "manifest.json").read_text()
    assert json.loads(b)["seed"] == 1
    assert a != b


def test_train_outputs(ws):
    run = ws / "run"
    for i in range(5):
        assert (run / f"fold_{i}.ckpt").exists()
        assert (run / f"fold_{i}.meta").exists()
    plan = json.loads((run / "fold_plan.json").read_text())
    assert plan["seed"] == 0
    assert len(plan["folds"]) == 5
    for f in plan["folds"]:
        assert not set(f["val_listeners"]) & set(f["train_listeners"])
    lines = (run / "folds.csv").read_text().splitlines()
    assert lines[0] == "fold,best_epoch,val_rmse"
    assert len(lines) == 6


def test_sidecar_records_model_config(ws):
    meta = (ws / "run" / "fold_0.meta").read_text()
    assert "model.d_model = 16" in meta
    assert "model.readout = mean" in meta
    assert "train.epochs = 1" in meta


def test_predict_and_rerun_byte_identical(ws):
    args = ["predict", str(ws / "run" / "fold_0.ckpt"),
            "--manifest", str(ws / "data" / "manifest.json")]
    assert main(args + ["--out", str(ws / "p1.csv")]) == 0
    assert main(args + ["--out", str(ws / "p2.csv")]) == 0
    assert (ws / "p1.csv").read_bytes() == (ws / "p2.csv").read_bytes()
    rows = read_predictions_csv(ws / "p1.csv")
    assert len(rows) == 12
    assert all(0.0 <= r["prediction"] <= 100.0 for r in rows)
    assert all(r["label"] is not None for r in rows)


def test_retrain_same_seed_reproduces_predictions(ws):
    """The full pipeline is deterministic: an independent training run with
    the same seed yields byte-identical prediction CSVs."""
    assert main(["train", "--manifest", str(ws / "data" / "manifest.json"),
                 "--model-config", str(ws / "model.cfg"),
                 "--train-config", str(ws / "train.cfg"),
                 "--out", str(ws / "run_again")]) == 0
    assert main(["predict", str(ws / "run_again" / "fold_0.ckpt"),
                 "--manifest", str(ws / "data" / "manifest.json"),
                 "--out", str(ws / "p3.csv")]) == 0
    assert (ws / "p3.csv").read_bytes() == (ws / "p1.csv").read_bytes()
    assert (ws / "run_again" / "folds.csv").read_bytes() == \
           (ws / "run" / "folds.csv").read_bytes()


def test_predict_ensemble(ws):
    ckpts = [str(ws / "run" / f"fold_{i}.ckpt") for i in range(5)]
    assert main(["predict", *ckpts,
                 "--manifest", str(ws / "data" / "manifest.json"),
                 "--out", str(ws / "ens.csv")]) == 0
    assert len(read_predictions_csv(ws / "ens.csv")) == 12


def test_predict_rejects_mismatched_sidecars(ws, tmp_path):
    alt = tmp_path / "alt.ckpt"
    shutil.copy(ws / "run" / "fold_0.ckpt", alt)
    meta = (ws / "run" / "fold_0.meta").read_text()
    (tmp_path / "alt.meta").write_text(meta.replace("model.d_model = 16",
                                                    "model.d_model = 32"))
    rc = main(["predict", str(ws / "run" / "fold_0.ckpt"), str(alt),
               "--manifest", str(ws / "data" / "manifest.json"),
               "--out", str(tmp_path / "x.csv")])
    assert rc == 2


def test_predict_requires_sidecar(ws, tmp_path):
    lonely = tmp_path / "lonely.ckpt"
    shutil.copy(ws / "run" / "fold_0.ckpt", lonely)
    rc = main(["predict", str(lonely),
               "--manifest", str(ws / "data" / "manifest.json"),
               "--out", str(tmp_path / "x.csv")])
    assert rc == 3


def test_evaluate_reports(ws, capsys):
    rc = main(["evaluate", "--predictions", str(ws / "p1.csv"),
               "--manifest", str(ws / "data" / "manifest.json"),
               "--train-manifest", str(ws / "data" / "manifest.json"),
               "--out", str(ws / "eval")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "overall RMSE" in out
    assert "listener_seen: pooled RMSE" in out
    strat = (ws / "eval" / "stratified.csv").read_text().splitlines()
    assert strat[0] == "group,identity,rmse,n"
    assert any(",(pooled)," in line for line in strat)
    assert (ws / "eval" / "scene_rmse.csv").exists()
    hist = (ws / "eval" / "scene_histogram.csv").read_text().splitlines()
    assert hist[0] == "bin_lo,bin_hi,count"


def test_evaluate_rejects_id_mismatch(ws, tmp_path, caplog):
    doc = json.loads((ws / "data" / "manifest.json").read_text())
    doc["utterances"] = doc["utterances"][:-1]
    trimmed = tmp_path / "trimmed.json"
    trimmed.write_text(json.dumps(doc))
    rc = main(["evaluate", "--predictions", str(ws / "p1.csv"),
               "--manifest", str(trimmed)])
    assert rc == 3
    assert "U00011" in caplog.text  # names exactly which ids are missing


def test_evaluate_needs_labels(ws, tmp_path):
    doc = json.loads((ws / "data" / "manifest.json").read_text())
    for u in doc["utterances"]:
        u["label"] = None
    unlabeled = tmp_path / "unlabeled.json"
    unlabeled.write_text(json.dumps(doc))
    rc = main(["evaluate", "--predictions", str(ws / "p1.csv"),
               "--manifest", str(unlabeled)])
    assert rc == 3


def test_predict_handles_unlabeled_manifests(ws, tmp_path):
    doc = json.loads((ws / "data" / "manifest.json").read_text())
    for u in doc["utterances"]:
        u["label"] = None
    unlabeled = tmp_path / "manifest.json"
    unlabeled.write_text(json.dumps(doc))
    shutil.copy(ws / "data" / "listeners.json", tmp_path / "listeners.json")
    shutil.copytree(ws / "data" / "features", tmp_path / "features")
    rc = main(["predict", str(ws / "run" / "fold_0.ckpt"),
               "--manifest", str(unlabeled), "--out", str(tmp_path / "p.csv")])
    assert rc == 0
    rows = read_predictions_csv(tmp_path / "p.csv")
    assert all(r["label"] is None for r in rows)


def test_train_rejects_unlabeled(ws, tmp_path):
    doc = json.loads((ws / "data" / "manifest.json").read_text())
    doc["utterances"][0]["label"] = None
    bad = tmp_path / "manifest.json"
    bad.write_text(json.dumps(doc))
    shutil.copy(ws / "data" / "listeners.json", tmp_path / "listeners.json")
    shutil.copytree(ws / "data" / "features", tmp_path / "features")
    rc = main(["train", "--manifest", str(bad),
               "--model-config", str(ws / "model.cfg"),
               "--train-config", str(ws / "train.cfg"),
               "--out", str(tmp_path / "run")])
    assert rc == 3


def test_sweep_runs_and_reports_argmin(ws, capsys):
    rc = main(["sweep", "--config", str(ws / "sweep.cfg"),
               "--manifest", str(ws / "data" / "manifest.json"),
               "--model-config", str(ws / "model.cfg"),
               "--train-config", str(ws / "train.cfg"),
               "--out", str(ws / "sweep.csv")])
    assert rc == 0
    assert "argmin: window 12-15 readout mean" in capsys.readouterr().out
    lines = (ws / "sweep.csv").read_text().splitlines()
    assert lines[0] == "window,readout,val_rmse,error"
    assert lines[1].startswith("12-15,mean,")


def test_sweep_rejects_single_layer_listener_token_at_parse(ws, tmp_path):
    cfg = tmp_path / "sweep.cfg"
    cfg.write_text("window_size = 1\ncandidates = 12-12\n"
                   "readouts = listener_token\nn_train = 9\n")
    rc = main(["sweep", "--config", str(cfg),
               "--manifest", str(ws / "data" / "manifest.json"),
               "--model-config", str(ws / "model.cfg"),
               "--train-config", str(ws / "train.cfg"),
               "--out", str(tmp_path / "s.csv")])
    assert rc == 2
    assert not (tmp_path / "s.csv").exists()  # rejected before any training


def test_sweep_rejects_malformed_window(ws, tmp_path):
    cfg = tmp_path / "sweep.cfg"
    cfg.write_text("window_size = 4\ncandidates = 12:15\nn_train = 9\n")
    rc = main(["sweep", "--config", str(cfg),
               "--manifest", str(ws / "data" / "manifest.json"),
               "--model-config", str(ws / "model.cfg"),
               "--train-config", str(ws / "train.cfg"),
               "--out", str(tmp_path / "s.csv")])
    assert rc == 2


def test_missing_config_file_is_a_data_error(tmp_path):
    rc = main(["synth", "--config", str(tmp_path / "nope.cfg"),
               "--out", str(tmp_path / "d")])
    assert rc == 3


def test_bad_config_value_is_a_config_error(ws, tmp_path):
    cfg = tmp_path / "synth.cfg"
    cfg.write_text("n_utterances = 0\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2
    cfg.write_text("utterances = 12\n")  # unknown key
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2


def test_train_bad_model_config_fails_before_output(ws, tmp_path):
    mcfg = tmp_path / "model.cfg"
    mcfg.write_text(MODEL_CFG.replace("readout = mean", "readout = sumpool"))
    rc = main(["train", "--manifest", str(ws / "data" / "manifest.json"),
               "--model-config", str(mcfg),
               "--train-config", str(ws / "train.cfg"),
               "--out", str(tmp_path / "run")])
    assert rc == 2
    assert not (tmp_path / "run").exists()
