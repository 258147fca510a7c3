import os
from dataclasses import replace

import numpy as np
import pytest

from conftest import make_events, tiny_config
from data_model import normalize_weights, split
from efe_ensemble import predict, train_defe
from errors import DataError
from model_store import load_model, read_manifest, read_training_log, save_model
from partition import TreeController


@pytest.fixture(scope="module")
def trained():
    events = normalize_weights(make_events(300, seed=13), 100.0, 1000.0)
    train, validation = split(events, 0.8, seed=2)
    return train_defe(train, validation, tiny_config(final_epochs=2)), train


def _bundle_bytes(directory) -> dict:
    return {name: open(os.path.join(directory, name), "rb").read() for name in sorted(os.listdir(directory))}


def test_save_load_save_is_byte_identical(tmp_path, trained):
    model, _ = trained
    first = save_model(model, str(tmp_path / "first"))
    second = save_model(load_model(first), str(tmp_path / "second"))
    assert _bundle_bytes(first) == _bundle_bytes(second)


def test_loaded_model_scores_identically(tmp_path, trained):
    model, train = trained
    loaded = load_model(save_model(model, str(tmp_path / "bundle")))
    np.testing.assert_array_equal(predict(loaded, train.features), predict(model, train.features))
    assert loaded.config == model.config
    assert loaded.partition_lines == model.partition_lines


def test_tree_controllers_survive_the_round_trip(tmp_path, trained):
    model, _ = trained
    loaded = load_model(save_model(model, str(tmp_path / "bundle")))
    original, restored = model.controllers[0], loaded.controllers[0]
    assert isinstance(restored, TreeController)
    np.testing.assert_array_equal(restored.children_left, original.children_left)
    np.testing.assert_array_equal(restored.threshold, original.threshold)


def test_manifest_records_config_and_learners(tmp_path, trained):
    model, _ = trained
    bundle = save_model(model, str(tmp_path / "bundle"), extra_files={"training.log": "stage test\n"})
    entries = read_manifest(bundle)
    assert entries["config.top_width"] == "4"
    assert entries["learners"] == "12"
    assert entries["learner.0"].endswith("T x momentum")
    assert entries["pca"].startswith("10 48 ")
    assert read_training_log(bundle) == "stage test\n"


def test_saving_over_an_existing_bundle_replaces_it(tmp_path, trained):
    model, _ = trained
    target = tmp_path / "bundle"
    target.mkdir()
    (target / "stale.txt").write_text("old")
    save_model(model, str(target))
    assert not (target / "stale.txt").exists()
    assert [p for p in os.listdir(tmp_path) if p.startswith(".defe-")] == []


def test_failed_save_leaves_nothing_behind(tmp_path, trained):
    model, _ = trained
    broken = replace(model, learners=model.learners[:1] + ["not a learner"])
    with pytest.raises(AttributeError):
        save_model(broken, str(tmp_path / "bundle"))
    assert os.listdir(tmp_path) == []


def test_missing_bundle_is_a_data_error(tmp_path):
    with pytest.raises(DataError, match="manifest"):
        load_model(str(tmp_path))


def test_truncated_array_file_is_detected(tmp_path, trained):
    model, _ = trained
    bundle = save_model(model, str(tmp_path / "bundle"))
    path = os.path.join(bundle, "pca.bin")
    with open(path, "rb") as f:
        payload = f.read()
    with open(path, "wb") as f:
        f.write(payload[:-8])
    with pytest.raises(DataError, match="pca.bin"):
        load_model(bundle)


def test_bundle_parent_that_is_a_file_is_a_data_error(tmp_path, trained):
    model, _ = trained
    (tmp_path / "occupied").write_text("x")
    with pytest.raises(DataError, match="bundle directory"):
        save_model(model, str(tmp_path / "occupied" / "bundle"))
