import logging
from dataclasses import replace

import numpy as np
import pytest

import nn_core
from conftest import make_events, tiny_config
from data_model import apply_normalization, default_schema, fit_normalization
from errors import ConfigError, DataError
from partition import (
    ControllerConfig,
    DiscriminativePartition,
    TreeController,
    balance_classes,
    build_subspaces,
    controller_config_from,
    controller_scores,
    derive_seed,
    discriminative_partition,
    feature_partition,
    random_interchange,
    recursive_partition,
    train_controller,
)


def constant_controller(score: float) -> TreeController:
    return TreeController(
        children_left=np.array([-1]),
        children_right=np.array([-1]),
        feature=np.array([-2]),
        threshold=np.array([-2.0]),
        leaf_value=np.array([score]),
    )


def stump(feature: int, threshold: float, below: float = 0.1, above: float = 0.9) -> TreeController:
    return TreeController(
        children_left=np.array([1, -1, -1]),
        children_right=np.array([2, -1, -1]),
        feature=np.array([feature, -2, -2]),
        threshold=np.array([threshold, -2.0, -2.0]),
        leaf_value=np.array([0.5, below, above]),
    )


def assert_two_block_partition(a, b, universe):
    assert len(np.intersect1d(a, b)) == 0
    np.testing.assert_array_equal(np.sort(np.concatenate([a, b])), np.sort(universe))


@pytest.fixture
def normalized():
    events = make_events(300, seed=4)
    return apply_normalization(events, fit_normalization(events))


# --- Controllers ---

def test_tree_controller_routes_on_its_split():
    controller = stump(feature=2, threshold=0.0)
    x = np.zeros((3, 30))
    x[:, 2] = [-1.0, 0.0, 1.0]
    np.testing.assert_array_equal(controller.score(x), [0.1, 0.1, 0.9])


@pytest.mark.parametrize("kind", ["nn", "tree"])
def test_trained_controllers_score_in_unit_interval(normalized, kind):
    config = controller_config_from(tiny_config(controller_kind=kind), seed=3)
    controller = train_controller(normalized, config)
    scores = controller_scores(controller, normalized.features)
    assert scores.shape == (len(normalized),)
    assert np.all((scores >= 0) & (scores <= 1))


def test_nn_controller_is_a_single_hidden_layer_net(normalized):
    config = controller_config_from(tiny_config(controller_kind="nn", controller_hidden=7), seed=0)
    controller = train_controller(normalized, config)
    assert controller.sizes == [30, 7, 1]


def test_controller_logs_one_line_per_epoch(normalized, caplog):
    config = controller_config_from(tiny_config(controller_kind="nn", controller_epochs=3), seed=0)
    with caplog.at_level(logging.INFO, logger="defe.training"):
        train_controller(normalized, config)
    assert [r.getMessage().split()[:2] for r in caplog.records if r.getMessage().startswith("epoch")] == [
        ["epoch", "0"], ["epoch", "1"], ["epoch", "2"],
    ]


def test_controller_needs_both_classes(normalized):
    background = normalized.subset(np.flatnonzero(~normalized.labels))
    with pytest.raises(DataError, match="both"):
        train_controller(background, ControllerConfig(kind="tree"))


def test_unknown_controller_kind_is_a_config_error(normalized):
    with pytest.raises(ConfigError):
        train_controller(normalized, ControllerConfig(kind="forest"))


# --- Discriminative partition ---

def test_all_selecting_controller_puts_signal_in_the_hit_set(normalized):
    partition = discriminative_partition(normalized, constant_controller(0.9))
    np.testing.assert_array_equal(partition.hit, np.flatnonzero(normalized.labels))
    np.testing.assert_array_equal(partition.anomalous, np.flatnonzero(~normalized.labels))
    assert len(partition.selected) == len(normalized) and len(partition.rejected) == 0


def test_nothing_selecting_controller_hits_every_background_event(normalized):
    partition = discriminative_partition(normalized, constant_controller(0.1))
    np.testing.assert_array_equal(partition.hit, np.flatnonzero(~normalized.labels))
    assert len(partition.selected) == 0


@pytest.mark.parametrize("seed", range(25))
def test_partitions_stay_exact_through_interchange(seed):
    rng = np.random.default_rng(seed)
    events = make_events(int(rng.integers(20, 200)), seed=seed, signal_fraction=rng.uniform(0.1, 0.9))
    controller = stump(int(rng.integers(0, 30)), float(rng.normal()))
    partition = discriminative_partition(events, controller)
    swapped = random_interchange(partition, float(rng.uniform(0, 1)), seed=seed)
    for p in (partition, swapped):
        assert_two_block_partition(p.hit, p.anomalous, p.universe)
        assert_two_block_partition(p.selected, p.rejected, p.universe)
    assert swapped.cardinalities() == partition.cardinalities()


def test_interchange_swaps_floor_alpha_times_the_smaller_set():
    partition = discriminative_partition(make_events(150, seed=1), stump(29, 0.8))
    small = min(len(partition.hit), len(partition.anomalous))
    swapped = random_interchange(partition, 0.05, seed=2)
    moved = len(np.setdiff1d(swapped.hit, partition.hit))
    assert moved == int(np.floor(0.05 * small))


def test_zero_alpha_leaves_the_partition_unchanged():
    partition = discriminative_partition(make_events(80, seed=1), stump(0, 0.0))
    swapped = random_interchange(partition, 0.0, seed=2)
    np.testing.assert_array_equal(swapped.hit, partition.hit)
    np.testing.assert_array_equal(swapped.selected, partition.selected)


def test_interchange_is_seeded():
    partition = discriminative_partition(make_events(120, seed=3), stump(5, 0.5))
    a = random_interchange(partition, 0.3, seed=9)
    b = random_interchange(partition, 0.3, seed=9)
    np.testing.assert_array_equal(a.hit, b.hit)
    np.testing.assert_array_equal(a.rejected, b.rejected)


def test_alpha_outside_unit_interval_is_rejected():
    partition = discriminative_partition(make_events(20, seed=0), stump(0, 0.0))
    with pytest.raises(ConfigError):
        random_interchange(partition, 1.5, seed=0)


def test_six_hand_labeled_events():
    base = make_events(6, seed=0)
    features = np.zeros((6, 30))
    features[:, 0] = [-1.0, 2.0, 3.0, -4.0, 5.0, -6.0]
    labels = np.array([True, True, False, False, True, False])
    events = replace(base, features=features, labels=labels, missing=np.zeros((6, 30), dtype=bool))
    # scores 0.9 above zero on feature 0, else 0.1
    partition = discriminative_partition(events, stump(0, 0.0))
    np.testing.assert_array_equal(partition.selected, [1, 2, 4])
    np.testing.assert_array_equal(partition.rejected, [0, 3, 5])
    np.testing.assert_array_equal(partition.hit, [1, 3, 4, 5])
    np.testing.assert_array_equal(partition.anomalous, [0, 2])


def test_score_at_the_threshold_counts_as_selected(normalized):
    partition = discriminative_partition(normalized, constant_controller(0.5), threshold=0.5)
    assert len(partition.selected) == len(normalized)


def test_full_interchange_of_equal_sets_on_twenty_events():
    universe = np.arange(20)
    partition = DiscriminativePartition(
        hit=universe[::2], anomalous=universe[1::2], selected=universe[:10], rejected=universe[10:], universe=universe,
    )
    swapped = random_interchange(partition, 1.0, seed=11)
    np.testing.assert_array_equal(swapped.hit, [1, 3, 5, 7, 9, 11, 13, 15, 17, 19])
    np.testing.assert_array_equal(swapped.anomalous, [0, 2, 4, 6, 8, 10, 12, 14, 16, 18])
    np.testing.assert_array_equal(swapped.selected, [10, 11, 12, 13, 14, 15, 16, 17, 18, 19])
    np.testing.assert_array_equal(swapped.rejected, [0, 1, 2, 3, 4, 5, 6, 7, 8, 9])


def test_twenty_event_interchange_moves_the_whole_smaller_set():
    universe = np.arange(20)
    partition = DiscriminativePartition(
        hit=universe[:15], anomalous=universe[15:], selected=universe[:4], rejected=universe[4:], universe=universe,
    )
    swapped = random_interchange(partition, 1.0, seed=11)
    assert set(range(15, 20)) <= set(swapped.hit.tolist())
    assert set(swapped.anomalous.tolist()) <= set(range(15))
    assert set(range(4)) <= set(swapped.rejected.tolist())
    assert len(swapped.anomalous) == 5 and len(swapped.selected) == 4
    again = random_interchange(partition, 1.0, seed=11)
    np.testing.assert_array_equal(again.anomalous, swapped.anomalous)
    np.testing.assert_array_equal(again.selected, swapped.selected)


def test_five_percent_of_a_hundred_swaps_five_each_way():
    universe = np.arange(1100)
    partition = DiscriminativePartition(
        hit=universe[:1000], anomalous=universe[1000:], selected=universe[:550], rejected=universe[550:], universe=universe,
    )
    swapped = random_interchange(partition, 0.05, seed=4)
    assert len(np.setdiff1d(swapped.anomalous, partition.anomalous)) == 5
    assert len(np.setdiff1d(swapped.hit, partition.hit)) == 5
    assert len(np.setdiff1d(swapped.selected, partition.selected)) == 27


@pytest.mark.parametrize("depth, leaves", [(1, 4), (2, 16)])
def test_recursive_partition_has_four_to_the_depth_leaves(normalized, depth, leaves):
    config = controller_config_from(tiny_config(controller_kind="tree"), seed=1)
    tree = recursive_partition(normalized, depth, config, alpha=0.05, seed=5)
    assert len(tree.leaves) == leaves
    assert len(tree.controllers) == sum(4 ** level for level in range(depth))
    if depth == 2:
        assert tree.leaves[0].name == "T/T" and tree.leaves[-1].name == "H_hat/H_hat"
    assert tree.describe()[0] == f"depth = {depth}"


def test_depth_three_is_rejected(normalized):
    with pytest.raises(ConfigError, match="1 or 2"):
        recursive_partition(normalized, 3, ControllerConfig(kind="tree"), 0.05, 0)


def _separated_events(n=300, seed=0, background_overlap=0.0):
    """Feature 20 is +5 for signal and -5 for background, except an overlapping share of background at +5."""
    events = make_events(n, seed=seed)
    rng = np.random.default_rng(seed)
    features = events.features.copy()
    background_up = ~events.labels & (rng.random(n) < background_overlap)
    features[:, 20] = np.where(events.labels | background_up, 5.0, -5.0)
    return replace(events, features=features)


def test_depth_two_names_the_empty_parent_set():
    config = ControllerConfig(kind="tree", tree_depth=1)
    with pytest.raises(DataError, match="'F' is empty"):
        recursive_partition(_separated_events(), 2, config, alpha=0.05, seed=0)


def test_depth_two_names_a_single_class_parent_set():
    events = _separated_events(background_overlap=0.2)
    config = ControllerConfig(kind="tree", tree_depth=1)
    depth_one = recursive_partition(events, 1, config, alpha=0.0, seed=0)
    anomalous = depth_one.leaves[1]
    assert anomalous.name == "F" and len(anomalous.indices) > 0
    assert not events.labels[anomalous.indices].any()
    with pytest.raises(DataError, match="'F' holds only one class"):
        recursive_partition(events, 2, config, alpha=0.0, seed=0)


# --- Feature partition and subspaces ---

def test_default_feature_partition_overlaps():
    features = feature_partition(default_schema(), "all")
    assert features.names == ("momentum", "derived", "all")
    assert [len(s) for s in features.subsets] == [17, 13, 30]


def test_primitive_feature_partition_splits_angles_from_momenta():
    schema = default_schema()
    features = feature_partition(schema, "primitive")
    energies, angles, everything = features.subsets
    assert len(angles) == 9 and len(energies) == 8 and len(everything) == 17
    assert all(schema.names[i].endswith(("_eta", "_phi")) for i in angles)
    assert "PRI_jet_num" in [schema.names[i] for i in energies]


def test_unknown_feature_set_is_rejected():
    with pytest.raises(ConfigError):
        feature_partition(default_schema(), "low")


def test_build_subspaces_orders_sample_sets_outer(normalized, caplog):
    partition = discriminative_partition(normalized, stump(29, 0.0))
    with caplog.at_level(logging.INFO, logger="defe.training"):
        subspaces = build_subspaces(normalized, partition, feature_partition(default_schema()), seed=1)
    assert len(subspaces) == 12
    assert [s.name for s in subspaces[:3]] == ["T x momentum", "T x derived", "T x all"]
    assert [s.feature_position for s in subspaces[3:6]] == [0, 1, 2]
    assert sum(r.getMessage().startswith("subspace ") for r in caplog.records) == 12


def test_empty_sample_set_is_a_data_error(normalized):
    partition = discriminative_partition(normalized, constant_controller(0.9))
    with pytest.raises(DataError, match="H_hat"):
        build_subspaces(normalized, partition, feature_partition(default_schema()))


def test_balancing_tops_up_the_minority_class():
    labels = np.array([True] * 5 + [False] * 95)
    indices = np.arange(100)
    balanced = balance_classes(indices, labels, 0.2, np.random.default_rng(0))
    signal = labels[balanced].sum()
    assert signal / len(balanced) >= 0.2
    # d = ceil((0.2 * 100 - 5) / 0.8)
    assert len(balanced) == 100 + 19
    np.testing.assert_array_equal(balanced[:100], indices)


def test_balanced_sets_are_left_alone():
    labels = np.array([True, False] * 10)
    indices = np.arange(20)
    np.testing.assert_array_equal(balance_classes(indices, labels, 0.2, np.random.default_rng(0)), indices)


def test_derived_seeds_are_stable_and_distinct():
    assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
    assert len({derive_seed(0, stage) for stage in range(50)}) == 50
    assert isinstance(nn_core.TrainConfig(seed=derive_seed(7, 3)).seed, int)
