import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from sgat.cli import CONFIG_FLAGS, SUMMARY_SCHEMA_VERSION, build_parser, main, resolve_config
from sgat.data import resolve_dataset

SUMMARY_KEYS = {
    "schema_version", "command", "dataset", "seed", "config", "accuracy", "train_accuracy",
    "val_accuracy", "best_epoch", "kept_edges", "total_edges", "edges_removed_pct", "homophily",
    "isolated_nodes", "runtime_seconds", "files",
}


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def karate_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("karate")
    assert run("train", "--dataset", "karate", "--lambda", "1e-2", "--seed", 0, "--output-dir", out) == 0
    return out


def test_train_writes_summary_checkpoint_and_log(karate_run):
    summary = json.loads((karate_run / "summary.json").read_text())
    assert set(summary) == SUMMARY_KEYS
    assert summary["schema_version"] == SUMMARY_SCHEMA_VERSION
    assert summary["accuracy"] >= 0.96
    assert summary["val_accuracy"] is None
    assert summary["config"]["lam"] == 0.01 and summary["config"]["seed"] == 0
    assert summary["total_edges"] == 156
    assert summary["edges_removed_pct"] == pytest.approx(100 * (1 - summary["kept_edges"] / 156))
    rows = read_csv(karate_run / "epochs.csv")
    assert len(rows) == summary["config"]["epochs"] + 1
    assert int(rows[-1]["kept_edges"]) == summary["kept_edges"]
    assert (karate_run / "checkpoint.json").exists()


def test_train_is_reproducible(tmp_path, karate_run):
    assert run("train", "--dataset", "karate", "--lambda", "1e-2", "--seed", 0, "--output-dir", tmp_path) == 0
    assert (tmp_path / "epochs.csv").read_text() == (karate_run / "epochs.csv").read_text()
    assert (tmp_path / "checkpoint.json").read_text() == (karate_run / "checkpoint.json").read_text()


def test_zero_epochs(tmp_path):
    assert run("train", "--dataset", "karate", "--epochs", 0, "--output-dir", tmp_path) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["best_epoch"] == 0
    assert 0.0 <= summary["accuracy"] <= 1.0


def test_unknown_dataset_lists_registry(tmp_path, capsys):
    assert run("train", "--dataset", "nope", "--output-dir", tmp_path) == 2
    err = capsys.readouterr().err
    assert "unknown dataset" in err and "karate" in err and "synth-assort" in err


def test_bad_flag_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        run("train", "--dataset", "karate", "--no-such-flag")
    assert exc.value.code == 2


def test_invalid_config_value_exits_2(tmp_path):
    assert run("train", "--dataset", "karate", "--dropout", 1.5, "--output-dir", tmp_path) == 2


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SGAT_OUTPUT_DIR", str(tmp_path / "env"))
    assert run("train", "--dataset", "karate", "--epochs", 1) == 0
    assert (tmp_path / "env" / "summary.json").exists()


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"lam": 0.5, "epochs": 7, "hidden": 4}))
    args = build_parser().parse_args(["train", "--dataset", "karate", "--config", str(cfg_file),
                                      "--epochs", "3"])
    cfg = resolve_config(args, "karate")
    assert cfg.epochs == 3  # flag beats file
    assert cfg.lam == 0.5 and cfg.hidden == 4  # file beats preset and defaults
    assert cfg.gate == "transductive"  # preset beats defaults
    assert cfg.lr == 0.01


def test_bad_config_file_exits_2(tmp_path):
    (tmp_path / "c.json").write_text("[1, 2]")
    assert run("train", "--dataset", "karate", "--config", tmp_path / "c.json", "--output-dir", tmp_path) == 2
    (tmp_path / "d.json").write_text(json.dumps({"lambda": 1}))
    assert run("train", "--dataset", "karate", "--config", tmp_path / "d.json", "--output-dir", tmp_path) == 2


def test_every_config_flag_is_parsed():
    values = {"--model": "gat", "--gate": "open"}
    argv = ["train", "--dataset", "karate"]
    for flag, (dest, typ, _) in CONFIG_FLAGS.items():
        argv += [flag, values.get(flag, "1" if typ is int else "0.25")]
    cfg = resolve_config(build_parser().parse_args(argv), "karate")
    assert cfg.model == "gat" and cfg.gate == "open" and cfg.heads == 1 and cfg.lam == 0.25


def test_evaluate_recomputes_accuracy(tmp_path, karate_run):
    assert run("evaluate", "--checkpoint", karate_run / "checkpoint.json", "--output-dir", tmp_path) == 0
    ev = json.loads((tmp_path / "evaluation.json").read_text())
    summary = json.loads((karate_run / "summary.json").read_text())
    assert ev["accuracy"] == summary["accuracy"]
    assert ev["kept_edges"] == summary["kept_edges"]


def test_evaluate_missing_checkpoint(tmp_path):
    assert run("evaluate", "--checkpoint", tmp_path / "none.json", "--output-dir", tmp_path) == 2


def test_prune_round_trip(tmp_path, karate_run):
    out = tmp_path / "pruned"
    assert run("prune", "--checkpoint", karate_run / "checkpoint.json", "--output", out) == 0
    summary = json.loads((out / "prune_summary.json").read_text())
    train_summary = json.loads((karate_run / "summary.json").read_text())
    assert summary["removed_edges"] == 156 - train_summary["kept_edges"]
    with open(out / "removed_edges.tsv") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    assert len(rows) == summary["removed_edges"]
    assert all(float(r["mask"]) == 0.0 and float(r["log_alpha"]) < 0 for r in rows)
    g = resolve_dataset("pruned", registry_path=out / "datasets.ini")
    assert g.n_nodes == 34
    assert g.n_non_self_edges == train_summary["kept_edges"]
    assert np.flatnonzero(g.train_mask).tolist() == [0, 33]
    ret = run("train", "--dataset", "pruned", "--registry", out / "datasets.ini", "--model", "gcn",
              "--epochs", 5, "--output-dir", tmp_path / "again")
    assert ret == 0


def test_prune_untrained_open_gates_removes_nothing(tmp_path):
    assert run("train", "--dataset", "karate", "--epochs", 0, "--output-dir", tmp_path) == 0
    assert run("prune", "--checkpoint", tmp_path / "checkpoint.json", "--output", tmp_path / "p") == 0
    summary = json.loads((tmp_path / "p" / "prune_summary.json").read_text())
    assert summary["removed_edges"] == 0


def test_prune_rejects_mismatched_graph(tmp_path, karate_run):
    ret = run("prune", "--checkpoint", karate_run / "checkpoint.json", "--dataset", "synth-dis",
              "--output", tmp_path / "p")
    assert ret == 2


def test_removal_curve(tmp_path, karate_run):
    ret = run("analyze", "removal-curve", "--checkpoint", karate_run / "checkpoint.json",
              "--fractions", "0,0.5", "--output-dir", tmp_path)
    assert ret == 0
    rows = read_csv(tmp_path / "removal_curve.csv")
    assert len(rows) == 6
    assert {r["strategy"] for r in rows} == {"top-desc", "bottom-desc", "random"}
    assert len({r["accuracy"] for r in rows if r["fraction"] == "0.0"}) == 1


def test_removal_curve_missing_checkpoint(tmp_path):
    ret = run("analyze", "removal-curve", "--checkpoint", tmp_path / "absent.json", "--output-dir", tmp_path)
    assert ret == 2
    with pytest.raises(SystemExit) as exc:
        run("analyze", "removal-curve", "--output-dir", tmp_path)
    assert exc.value.code == 2


def test_lambda_sweep_rows(tmp_path):
    ret = run("analyze", "lambda-sweep", "--dataset", "synth-dis", "--grid", "0,1e-4,1e-3,5e-3",
              "--epochs", 20, "--output-dir", tmp_path)
    assert ret == 0
    rows = read_csv(tmp_path / "lambda_sweep.csv")
    assert [float(r["lam"]) for r in rows] == [0.0, 1e-4, 1e-3, 5e-3]


def test_bad_grid_exits_2(tmp_path):
    assert run("analyze", "lambda-sweep", "--dataset", "karate", "--grid", "a,b", "--output-dir", tmp_path) == 2


def test_head_sweep_and_attention_variance(tmp_path):
    assert run("analyze", "head-sweep", "--dataset", "karate", "--grid", "1,2", "--epochs", 10,
               "--output-dir", tmp_path) == 0
    assert len(read_csv(tmp_path / "head_sweep.csv")) == 2
    assert run("analyze", "attn-variance", "--dataset", "karate", "--epochs", 10,
               "--output-dir", tmp_path) == 0
    bins = read_csv(tmp_path / "attn_variance.csv")
    assert sum(int(b["count"]) for b in bins) == 190


def test_attention_variance_rejects_sgat_checkpoint(tmp_path, karate_run):
    ret = run("analyze", "attn-variance", "--checkpoint", karate_run / "checkpoint.json",
              "--output-dir", tmp_path)
    assert ret == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sgat", "train", "--dataset", "karate", "--epochs", "1",
                           "--output-dir", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "karate: accuracy" in proc.stdout
