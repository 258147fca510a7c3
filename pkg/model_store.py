"""
DEFE model bundles: a directory holding a versioned `manifest`, one network
manifest plus raw little-endian float64 layer files per network, and raw
arrays for the normalization statistics, tree controllers and PCA.

Bundles are written into a temporary sibling directory and renamed into
place, so a failed save never leaves a partial bundle behind.
"""
import logging
import os
import shutil
import tempfile
from dataclasses import fields

import numpy as np

import nn_core
from config import RunConfig, config_from_mapping
from data_model import NormalizationStats
from efe_ensemble import DEFEModel, FeatureLearner, PCAProjection
from errors import DataError
from partition import TreeController

logger = logging.getLogger(__name__)

BUNDLE_VERSION = 1
MANIFEST_NAME = "manifest"
LOG_NAME = "training.log"
PARAM_DTYPE = nn_core.PARAM_DTYPE


# --- Raw arrays ---

def _write_array(directory: str, filename: str, *arrays) -> str:
    payload = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays]).astype(PARAM_DTYPE)
    with open(os.path.join(directory, filename), "wb") as f:
        f.write(payload.tobytes())
    return filename


def _read_array(directory: str, filename: str, size: int) -> np.ndarray:
    path = os.path.join(directory, filename)
    if not os.path.exists(path):
        raise DataError(f"Bundle file '{filename}' is missing.", source=__name__)
    payload = np.fromfile(path, dtype=PARAM_DTYPE).astype(np.float64)
    if payload.size != size:
        raise DataError(f"Bundle file '{filename}' holds {payload.size} values, expected {size}.", source=__name__)
    return payload


# --- Save ---

def _write_bundle(model: DEFEModel, directory: str, extra_files: dict):
    lines = [f"defe-model {BUNDLE_VERSION}"]
    lines += [f"config.{line}" for line in model.config.to_lines()]
    lines += [f"partition.{line}" for line in model.partition_lines]

    stats = model.stats
    lines.append(f"stats.names = {','.join(stats.names)}")
    lines.append(f"stats = {_write_array(directory, 'normalization.bin', stats.median, stats.mean, stats.std)}")

    lines.append(f"controllers = {len(model.controllers)}")
    for i, controller in enumerate(model.controllers):
        name = f"controller_{i}"
        if isinstance(controller, TreeController):
            filename = _write_array(
                directory, f"{name}.bin",
                controller.children_left, controller.children_right, controller.feature,
                controller.threshold, controller.leaf_value,
            )
            lines.append(f"controller.{i} = tree {len(controller.leaf_value)} {filename}")
        else:
            nn_core.save_network(controller, directory, name)
            lines.append(f"controller.{i} = nn {name}")

    lines.append(f"learners = {len(model.learners)}")
    for i, learner in enumerate(model.learners):
        name = f"learner_{i}"
        nn_core.save_network(learner.encoder, directory, name)
        head = "none"
        if learner.head is not None:
            head = f"{name}_head"
            nn_core.save_network(nn_core.NetworkParams((learner.head,), learner.head.in_dim), directory, head)
        indices = ",".join(str(j) for j in learner.feature_indices)
        lines.append(f"learner.{i} = {name} {head} {indices} {learner.name}")

    if model.pca is None:
        lines.append("pca = none")
    else:
        pca = model.pca
        filename = _write_array(directory, "pca.bin", pca.mean, pca.components, pca.explained_variance)
        lines.append(f"pca = {pca.k} {pca.mean.shape[0]} {filename}")

    nn_core.save_network(model.classifier, directory, "classifier")
    lines.append("classifier = classifier")

    for filename, text in (extra_files or {}).items():
        with open(os.path.join(directory, filename), "w", encoding="utf-8") as f:
            f.write(text)
    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def save_model(model: DEFEModel, out_dir: str, extra_files: dict = None) -> str:
    """
    Writes `model` to `out_dir`, replacing any existing bundle there.

    Args:
        extra_files (dict, optional): `{filename: text}` written next to the manifest,
            e.g. the training log.
    """
    out_dir = os.path.abspath(out_dir)
    parent = os.path.dirname(out_dir)
    try:
        os.makedirs(parent, exist_ok=True)
        staging = tempfile.mkdtemp(prefix=".defe-bundle-", dir=parent)
    except OSError as e:
        raise DataError(f"Cannot create the bundle directory '{out_dir}': {e}", source=__name__) from e
    try:
        _write_bundle(model, staging, extra_files)
        if os.path.exists(out_dir):
            retired = tempfile.mkdtemp(prefix=".defe-old-", dir=parent)
            os.replace(out_dir, os.path.join(retired, "bundle"))
            os.replace(staging, out_dir)
            shutil.rmtree(retired, ignore_errors=True)
        else:
            os.replace(staging, out_dir)
    except OSError as e:
        shutil.rmtree(staging, ignore_errors=True)
        raise DataError(f"Writing the bundle '{out_dir}' failed: {e}", source=__name__) from e
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    logger.info("Saved DEFE model bundle to %s", out_dir)
    return out_dir


# --- Load ---

def read_manifest(bundle_dir: str) -> dict:
    path = os.path.join(bundle_dir, MANIFEST_NAME)
    if not os.path.exists(path):
        raise DataError(f"No model bundle at '{bundle_dir}' (manifest missing).", source=__name__)
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != f"defe-model {BUNDLE_VERSION}":
        raise DataError(f"Unsupported bundle version in '{path}'.", source=__name__)
    entries = {}
    for line in lines[1:]:
        key, sep, value = line.partition(" = ")
        if not sep:
            raise DataError(f"Malformed manifest line '{line}'.", source=__name__)
        entries[key] = value
    return entries


def _prefixed(entries: dict, prefix: str) -> dict:
    return {key[len(prefix):]: value for key, value in entries.items() if key.startswith(prefix)}


def _load_controller(bundle_dir: str, entry: str):
    kind, rest = entry.split(" ", 1)
    if kind == "nn":
        return nn_core.load_network(bundle_dir, rest)[0]
    n_nodes, filename = rest.split(" ", 1)
    n_nodes = int(n_nodes)
    left, right, feature, threshold, leaf_value = _read_array(bundle_dir, filename, 5 * n_nodes).reshape(5, n_nodes)
    return TreeController(
        children_left=left.astype(np.int64),
        children_right=right.astype(np.int64),
        feature=feature.astype(np.int64),
        threshold=threshold.copy(),
        leaf_value=leaf_value.copy(),
    )


def _load_learner(bundle_dir: str, entry: str) -> FeatureLearner:
    name, head_name, indices, subspace = entry.split(" ", 3)
    encoder, _ = nn_core.load_network(bundle_dir, name)
    head = None
    if head_name != "none":
        head = nn_core.load_network(bundle_dir, head_name)[0].layers[0]
    return FeatureLearner(subspace, tuple(int(j) for j in indices.split(",")), encoder, head)


def load_model(bundle_dir: str) -> DEFEModel:
    entries = read_manifest(bundle_dir)
    known = {f.name for f in fields(RunConfig)}
    config_values = {key: value for key, value in _prefixed(entries, "config.").items() if key in known}
    config = config_from_mapping(config_values)

    names = tuple(entries["stats.names"].split(","))
    d = len(names)
    median, mean, std = _read_array(bundle_dir, entries["stats"], 3 * d).reshape(3, d)
    stats = NormalizationStats(names=names, median=median.copy(), mean=mean.copy(), std=std.copy())

    controllers = [_load_controller(bundle_dir, entries[f"controller.{i}"]) for i in range(int(entries["controllers"]))]
    learners = [_load_learner(bundle_dir, entries[f"learner.{i}"]) for i in range(int(entries["learners"]))]

    pca = None
    if entries["pca"] != "none":
        k, dim, filename = entries["pca"].split(" ", 2)
        k, dim = int(k), int(dim)
        payload = _read_array(bundle_dir, filename, dim + k * dim + k)
        pca = PCAProjection(
            mean=payload[:dim].copy(),
            components=payload[dim:dim + k * dim].reshape(k, dim).copy(),
            explained_variance=payload[dim + k * dim:].copy(),
        )

    classifier, _ = nn_core.load_network(bundle_dir, entries["classifier"])
    partition_lines = [f"{key} = {value}" for key, value in _prefixed(entries, "partition.").items()]
    return DEFEModel(
        stats=stats,
        controllers=controllers,
        partition_lines=partition_lines,
        learners=learners,
        pca=pca,
        classifier=classifier,
        config=config,
    )


def read_training_log(bundle_dir: str) -> str:
    path = os.path.join(bundle_dir, LOG_NAME)
    if not os.path.exists(path):
        return ""
    with open(path, "r", encoding="utf-8") as f:
        return f.read()
