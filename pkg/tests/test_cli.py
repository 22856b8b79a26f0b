import csv
import json

import numpy as np
import pytest

from hidra.cli import main
from hidra.config import PRESETS, read_config_file
from hidra.episodes import load_pool
from hidra.meta_learners import InnerConfig, OuterConfig, TrainConfig, init_model
from hidra.network import BackboneSpec, load_params

DATA = ["--features", "8", "--classes", "24", "--split", "10/4/10", "--instances-per-class", "30"]
SMALL = ["--hidden", "12", "--iterations", "12", "--k-shot", "2", "--q-query", "3", "--batch-size", "2",
         "--checkpoint-every", "6", "--val-every", "4", "--val-tasks", "2"]


def run(*argv):
    return main([str(a) for a in argv])


def error_of(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert run("gen-data", "--out", d, *DATA) == 0
    return d


@pytest.fixture(scope="module")
def hidra_run(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("hidra")
    assert run("train", "--data", data_dir, "--out", out, "--method", "hidra", "--n-way", "2-4", *SMALL) == 0
    return out


@pytest.fixture(scope="module")
def maml_run(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("maml")
    assert run("train", "--data", data_dir, "--out", out, "--method", "maml", "--n-way", "5", *SMALL) == 0
    return out


def test_gen_data_split_and_determinism(tmp_path, data_dir):
    pools = {r: load_pool(data_dir / f"{n}.fsds", r) for r, n in
             [("train", "train"), ("validation", "val"), ("test", "test")]}
    assert [p.n_classes for p in pools.values()] == [10, 4, 10]
    ids = [set(p.class_ids) for p in pools.values()]
    assert len(set.union(*ids)) == 24
    assert run("gen-data", "--out", tmp_path, *DATA) == 0
    for name in ("train", "val", "test"):
        assert (tmp_path / f"{name}.fsds").read_bytes() == (data_dir / f"{name}.fsds").read_bytes()


def test_train_outputs(hidra_run):
    names = {p.name for p in hidra_run.iterdir()}
    assert {"config.resolved", "train_log.csv", "checkpoint_000006.bin", "checkpoint_000012.bin",
            "checkpoint_final.bin"} <= names
    with open(hidra_run / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 12
    assert all(2 <= int(r["c_b"]) <= 4 for r in rows)
    assert [r["iteration"] for r in rows if r["val_acc"]] == ["4", "8", "12"]
    assert all(r["wall_ms"] == "" for r in rows)


def test_static_head_with_class_range_is_rejected(tmp_path, data_dir, capsys):
    assert run("train", "--data", data_dir, "--out", tmp_path, "--method", "maml", "--n-way", "2-4") == 1
    err = error_of(capsys)
    assert err["command"] == "train" and "static head requires fixed N" in err["message"]
    assert not (tmp_path / "checkpoint_final.bin").exists()


def test_validation_reports_every_problem(tmp_path, data_dir, capsys):
    assert run("train", "--data", data_dir, "--out", tmp_path, "--method", "maml", "--n-way", "2-4",
               "--alpha", "-1", "--iterations", "-3") == 1
    msg = error_of(capsys)["message"]
    assert "static head" in msg and "alpha" in msg and "iterations" in msg


def test_zero_iterations_saves_the_initialization(tmp_path, data_dir):
    assert run("train", "--data", data_dir, "--out", tmp_path, "--method", "hidra", "--n-way", "2-3",
               "--hidden", "12", "--iterations", "0", "--seed", "7") == 0
    got = load_params(tmp_path / "checkpoint_final.bin")
    tc = TrainConfig("hidra", BackboneSpec(8, (12,)), InnerConfig(), OuterConfig(), n_range=(2, 3))
    want = init_model(tc, 7)
    for k, v in want.backbone.params.items():
        assert got.backbone.params[k].tobytes() == v.tobytes()
    assert got.master.weights.tobytes() == want.master.weights.tobytes()
    assert got.master.bias == want.master.bias


def test_omniglot_preset(tmp_path, data_dir):
    assert run("train", "--data", data_dir, "--out", tmp_path, "--preset", "omniglot", "--n-way", "2-4",
               "--iterations", "0") == 0
    snap = read_config_file(tmp_path / "config.resolved")
    assert (snap["alpha"], snap["inner_steps"], snap["batch_size"], snap["beta"]) == (0.4, 1, 32, 1e-3)
    assert PRESETS["omniglot"]["batch_size"] == 32


def test_flags_override_config_file(tmp_path, data_dir):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"alpha = 0.2\ninner_steps = 3\ndata = {data_dir}\n")
    assert run("train", "--config", cfg, "--out", tmp_path / "o", "--alpha", "0.05", "--n-way", "2-3",
               "--iterations", "0") == 0
    snap = read_config_file(tmp_path / "o" / "config.resolved")
    assert snap["alpha"] == 0.05 and snap["inner_steps"] == 3


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("[run]\nlearning_rate = 0.1\n")
    assert run("train", "--config", cfg, "--out", tmp_path) == 1
    assert "learning_rate" in error_of(capsys)["message"]


def test_eval_dynamic_head_over_class_range(hidra_run, data_dir):
    assert run("eval", "--data", data_dir, "--out", hidra_run, "--nway", "2-7", "--eval-tasks", "6",
               "--eval-steps", "2") == 0
    with open(hidra_run / "eval_report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 * 3
    assert {int(r["N"]) for r in rows} == set(range(2, 8))
    assert all(r["flag"] == "" for r in rows)
    # later commands keep the training settings in the shared snapshot
    assert read_config_file(hidra_run / "config.resolved")["n_way"] == "2-4"


def test_eval_static_head_at_other_class_count_is_flagged(maml_run, data_dir, capsys):
    assert run("eval", "--data", data_dir, "--out", maml_run, "--nway", "5,7", "--eval-tasks", "4",
               "--eval-steps", "1") == 0
    assert "warning" in capsys.readouterr().err
    with open(maml_run / "eval_report.csv") as fh:
        rows = [r for r in csv.DictReader(fh) if r["N"] == "7"]
    assert len(rows) == 2
    for r in rows:
        assert float(r["mean_acc"]) == 1 / 7 and r["flag"] == "static_head_C=5" and r["n_tasks"] == "0"


def test_probe_and_export(maml_run, data_dir):
    assert run("probe", "--data", data_dir, "--out", maml_run, "--eval-tasks", "3", "--eval-steps", "1") == 0
    with open(maml_run / "probe_report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["neuron"] for r in rows] == ["0", "1", "2", "3", "4", "baseline"]
    assert all(r["N"] == "5" for r in rows)
    assert run("export-weights", "--out", maml_run) == 0
    lines = (maml_run / "head_weights.csv").read_text().splitlines()
    assert lines[0] == ",".join([f"w{i}" for i in range(12)] + ["bias"]) and len(lines) == 6


def test_probe_on_dynamic_head_points_to_nway(hidra_run, data_dir, capsys):
    assert run("probe", "--data", data_dir, "--out", hidra_run) == 1
    err = error_of(capsys)
    assert err["command"] == "probe" and "--nway" in err["message"]


def test_missing_checkpoint_is_reported(tmp_path, data_dir, capsys):
    assert run("eval", "--data", data_dir, "--out", tmp_path) == 1
    assert set(error_of(capsys)) == {"error", "command", "message"}


def test_snapshot_rerun_is_bitwise_identical(tmp_path, hidra_run, data_dir):
    snap = hidra_run / "config.resolved"
    assert run("train", "--config", snap, "--out", tmp_path) == 0
    for name in ("train_log.csv", "checkpoint_final.bin", "checkpoint_000006.bin"):
        assert (tmp_path / name).read_bytes() == (hidra_run / name).read_bytes(), name
    assert run("eval", "--config", snap, "--out", tmp_path) == 0
    assert (tmp_path / "eval_report.csv").read_bytes() == (hidra_run / "eval_report.csv").read_bytes()


def test_threads_do_not_change_outputs(tmp_path, hidra_run, data_dir):
    assert run("train", "--config", hidra_run / "config.resolved", "--out", tmp_path, "--threads", "3") == 0
    assert (tmp_path / "checkpoint_final.bin").read_bytes() == (hidra_run / "checkpoint_final.bin").read_bytes()
    assert run("eval", "--data", data_dir, "--out", tmp_path, "--threads", "2") == 0
    one = np.loadtxt(hidra_run / "eval_report.csv", delimiter=",", skiprows=1, usecols=(4,))
    two = np.loadtxt(tmp_path / "eval_report.csv", delimiter=",", skiprows=1, usecols=(4,))
    assert one.tobytes() == two.tobytes()
