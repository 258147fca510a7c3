import json
import os

import pandas as pd
import pytest

from cli import main
from conftest import make_events, write_csv


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    train_csv = write_csv(make_events(400, seed=31), root / "training.csv")
    test_csv = write_csv(make_events(150, seed=32), root / "test.csv")
    config = root / "defe.conf"
    config.write_text(
        "controller_kind = tree\n"
        "schedule_s1 = 8,4\nschedule_s2 = 6,4\nschedule_s3 = 8,4\ntop_width = 4\n"
        "pretrain_epochs = 2\nfinetune_epochs = 2\npca_components = 10\n"
        "final_layers = 8\nfinal_epochs = 3\nbatch_size = 25\nhistogram_bins = 20\n",
        encoding="utf-8",
    )
    bundle = str(root / "model")
    assert main(["train", "--config", str(config), "--data", train_csv, "--out", bundle]) == 0
    return {"root": root, "train": train_csv, "test": test_csv, "config": str(config), "bundle": bundle}


def _bundle_bytes(directory) -> dict:
    return {name: open(os.path.join(directory, name), "rb").read() for name in sorted(os.listdir(directory))}


# --- train ---

def test_train_writes_bundle_and_log(workspace):
    files = os.listdir(workspace["bundle"])
    assert "manifest" in files and "classifier.manifest" in files
    assert sum(name.startswith("learner_") and name.endswith("_head.manifest") for name in files) == 12
    log = open(os.path.join(workspace["bundle"], "training.log"), encoding="utf-8").read().splitlines()
    assert any(line.startswith("subspace T") for line in log)
    assert any(line.startswith("epoch 0 loss ") and " val " in line for line in log)
    assert any(line.startswith("stop epoch ") for line in log)


def test_training_twice_gives_identical_bundles(workspace):
    again = str(workspace["root"] / "model_again")
    assert main(["train", "--config", workspace["config"], "--data", workspace["train"], "--out", again]) == 0
    assert _bundle_bytes(again) == _bundle_bytes(workspace["bundle"])


def test_seed_override_changes_the_model(workspace):
    other = str(workspace["root"] / "model_seed")
    assert main(["train", "--config", workspace["config"], "--seed", "5", "--data", workspace["train"], "--out", other]) == 0
    manifest = open(os.path.join(other, "manifest"), encoding="utf-8").read()
    assert "config.seed = 5" in manifest
    assert _bundle_bytes(other)["classifier_layer_0.bin"] != _bundle_bytes(workspace["bundle"])["classifier_layer_0.bin"]


def test_corrupt_csv_exits_with_data_error(workspace, capsys):
    path = workspace["root"] / "corrupt.csv"
    lines = open(workspace["train"], encoding="utf-8").read().splitlines()
    cells = lines[4].split(",")
    cells[3] = "oops"
    lines[4] = ",".join(cells)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    out = str(workspace["root"] / "never")

    assert main(["train", "--config", workspace["config"], "--data", str(path), "--out", out]) == 3
    assert "error [data_model]: Row 5" in capsys.readouterr().err
    assert not os.path.exists(out)


def test_invalid_config_exits_with_config_error(workspace, capsys):
    bad = workspace["root"] / "bad.conf"
    bad.write_text("alpha = 2\n", encoding="utf-8")
    code = main(["train", "--config", str(bad), "--data", workspace["train"], "--out", str(workspace["root"] / "x")])
    assert code == 2
    assert capsys.readouterr().err.startswith("error [config]:")


def test_missing_data_file_exits_with_data_error(workspace):
    assert main(["train", "--data", str(workspace["root"] / "absent.csv"), "--out", str(workspace["root"] / "y")]) == 3


# --- evaluate ---

def test_evaluate_writes_report_and_roc(workspace):
    report = workspace["root"] / "eval" / "report.txt"
    assert main(["evaluate", "--model", workspace["bundle"], "--data", workspace["test"], "--out", str(report)]) == 0
    values = dict(line.split("=", 1) for line in report.read_text().splitlines())
    for key in ("auc", "ams", "discovery_significance_z", "n_hat_s", "diversity_between_learners"):
        assert key in values
    payload = json.loads((workspace["root"] / "eval" / "report.json").read_text())
    assert 0.0 <= payload["auc"] <= 1.0
    roc = pd.read_csv(workspace["root"] / "eval" / "report_roc.tsv", sep="\t")
    assert list(roc.columns) == ["threshold", "tpr", "fpr"]


def test_evaluate_rejects_a_foreign_schema(workspace, capsys):
    text = open(workspace["test"], encoding="utf-8").read().replace("PRI_met_sumet", "PRI_met_total")
    path = workspace["root"] / "foreign.csv"
    path.write_text(text, encoding="utf-8")
    code = main(["evaluate", "--model", workspace["bundle"], "--data", str(path), "--out", str(workspace["root"] / "r.txt")])
    assert code == 3
    assert "PRI_met_sumet" in capsys.readouterr().err


# --- extract ---

def test_extract_writes_both_feature_tables(workspace):
    out = workspace["root"] / "features" / "extreme.tsv"
    args = ["extract", "--model", workspace["bundle"], "--data", workspace["test"], "--out", str(out)]
    assert main(args) == 0
    extreme = pd.read_csv(out, sep="\t")
    reduced = pd.read_csv(workspace["root"] / "features" / "extreme_pca.tsv", sep="\t")
    assert extreme.shape == (150, 1 + 48)
    assert reduced.shape == (150, 1 + 10)
    assert extreme["EventId"].iloc[0] == 100000
    first = out.read_bytes()
    assert main(args) == 0
    assert out.read_bytes() == first


# --- histograms ---

def test_histograms_respect_the_sample_fraction(workspace):
    out = workspace["root"] / "hist"
    args = ["histograms", "--model", workspace["bundle"], "--data", workspace["test"], "--out", str(out), "--sample-fraction", "0.25"]
    assert main(args) == 0
    files = sorted(os.listdir(out))
    assert len(files) == 12
    frame = pd.read_csv(out / files[0], sep="\t")
    assert len(frame) == 20
    assert abs(frame["signal"].sum() - 1.0) < 1e-9


# --- compare ---

def test_compare_reports_every_model_per_seed(workspace):
    out = workspace["root"] / "compare.tsv"
    args = [
        "compare", "--config", workspace["config"], "--data", workspace["train"], "--out", str(out),
        "--seeds", "0,1", "--train-size", "250", "--test-size", "120",
    ]
    assert main(args) == 0
    table = pd.read_csv(out, sep="\t")
    assert list(table.columns) == ["model", "seed", "auc", "z"]
    assert sorted(table["model"].unique()) == ["defe", "defe_primitive", "dnn"]
    assert len(table) == 6
    assert table["auc"].between(0, 1).all()


def test_compare_needs_enough_events(workspace):
    args = ["compare", "--data", workspace["test"], "--out", str(workspace["root"] / "c.tsv"), "--train-size", "200", "--test-size", "100"]
    assert main(args) == 3


# --- output errors ---

def test_unwritable_output_exits_with_a_data_error(workspace, capsys):
    blocker = workspace["root"] / "blocker"
    blocker.write_text("not a directory", encoding="utf-8")
    args = ["extract", "--model", workspace["bundle"], "--data", workspace["test"], "--out", str(blocker / "features.tsv")]
    assert main(args) == 3
    assert capsys.readouterr().err.startswith("error [cli]:")


def test_bundle_under_a_file_exits_with_a_data_error(workspace, capsys):
    blocker = workspace["root"] / "blocker_bundle"
    blocker.write_text("not a directory", encoding="utf-8")
    args = ["train", "--config", workspace["config"], "--data", workspace["train"], "--out", str(blocker / "model")]
    assert main(args) == 3
    assert capsys.readouterr().err.startswith("error [model_store]:")
