"""
Discriminative partition of the sample space by a deliberately weak controller,
random interchange, the overlapping feature partition, and the resulting
sample-feature subspaces the feature learners are trained on.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from sklearn.tree import DecisionTreeClassifier

import nn_core
from data_model import Dataset, FeatureSchema, training_weights
from errors import ConfigError, DataError

logger = logging.getLogger(__name__)
training_log = logging.getLogger("defe.training")

# --- Constants ---
SAMPLE_SET_NAMES = ("T", "F", "G_hat", "H_hat")
MAX_DEPTH = 2


def derive_seed(seed: int, *path: int) -> int:
    """Stable child seed for a position in the pipeline (stage, learner, level, ...)."""
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


# --- Controllers ---

@dataclass(frozen=True)
class TreeController:
    """A fitted decision tree flattened to arrays; leaves hold the signal probability."""

    children_left: np.ndarray
    children_right: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    leaf_value: np.ndarray

    def score(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        node = np.zeros(len(x), dtype=np.int64)
        rows = np.arange(len(x))
        while True:
            left = self.children_left[node]
            internal = left >= 0
            if not internal.any():
                return self.leaf_value[node]
            go_left = x[rows, np.maximum(self.feature[node], 0)] <= self.threshold[node]
            node = np.where(internal, np.where(go_left, left, self.children_right[node]), node)


Controller = Union[nn_core.NetworkParams, TreeController]


@dataclass(frozen=True)
class ControllerConfig:
    kind: str = "nn"
    hidden: int = 30
    epochs: int = 5
    threshold: float = 0.5
    tree_depth: int = 3
    seed: int = 0
    use_weights: bool = True
    train: nn_core.TrainConfig = field(default_factory=nn_core.TrainConfig)


def controller_config_from(run_config, seed: int) -> ControllerConfig:
    return ControllerConfig(
        kind=run_config.controller_kind,
        hidden=run_config.controller_hidden,
        epochs=run_config.controller_epochs,
        threshold=run_config.controller_threshold,
        tree_depth=run_config.controller_tree_depth,
        seed=seed,
        use_weights=run_config.finetune_weighted,
        train=nn_core.train_config_from(run_config, run_config.controller_epochs, seed),
    )


def controller_scores(controller: Controller, x) -> np.ndarray:
    if isinstance(controller, TreeController):
        return controller.score(x)
    return nn_core.predict_scores(controller, x)


def train_controller(train: Dataset, config: ControllerConfig) -> Controller:
    """
    A weak classifier: by default a 1-hidden-layer sigmoid net trained for only a
    few epochs, or a shallow decision tree.
    """
    if not train.is_labeled:
        raise DataError("The controller needs a labeled dataset.", source=__name__)
    n_signal = int(train.labels.sum())
    if n_signal == 0 or n_signal == len(train):
        raise DataError("The controller needs both signal and background events.", source=__name__)
    weights = training_weights(train, config.use_weights)

    if config.kind == "tree":
        tree = DecisionTreeClassifier(max_depth=config.tree_depth, random_state=config.seed)
        tree.fit(train.features, train.labels, sample_weight=weights)
        structure = tree.tree_
        values = structure.value[:, 0, :]
        signal_column = list(tree.classes_).index(True)
        return TreeController(
            children_left=structure.children_left.astype(np.int64),
            children_right=structure.children_right.astype(np.int64),
            feature=structure.feature.astype(np.int64),
            threshold=structure.threshold.astype(np.float64),
            leaf_value=values[:, signal_column] / values.sum(axis=1),
        )
    if config.kind != "nn":
        raise ConfigError(f"Unknown controller kind '{config.kind}'.", source=__name__)

    rng = np.random.default_rng(config.seed)
    net = nn_core.init_network(train.features.shape[1], [config.hidden, 1], rng)
    targets = train.labels.astype(np.float64)
    velocity = None
    training_log.info(f"stage controller hidden {config.hidden} epochs {config.epochs}")
    for epoch in range(config.epochs):
        net, velocity, loss = nn_core.train_epoch(
            net, train.features, targets, weights, nn_core.WEIGHTED_CROSS_ENTROPY, velocity, epoch, config.train, rng
        )
        training_log.info(f"epoch {epoch} loss {loss:.6f}")
    return net


# --- Sample-space partition ---

@dataclass(frozen=True)
class SampleSet:
    name: str
    indices: np.ndarray


@dataclass(frozen=True)
class DiscriminativePartition:
    """
    Index sets over a dataset: T (hit: correctly classified), F (anomalous),
    G_hat (approximate selection: scored signal) and H_hat (approximate rejection).
    """

    hit: np.ndarray
    anomalous: np.ndarray
    selected: np.ndarray
    rejected: np.ndarray
    universe: np.ndarray
    controller: Controller = field(default=None, repr=False, compare=False)

    def sample_sets(self, prefix: str = "") -> list:
        sets = (self.hit, self.anomalous, self.selected, self.rejected)
        return [SampleSet(prefix + name, indices) for name, indices in zip(SAMPLE_SET_NAMES, sets)]

    def cardinalities(self) -> dict:
        return {s.name: len(s.indices) for s in self.sample_sets()}


def discriminative_partition(dataset: Dataset, controller: Controller, threshold: float = 0.5, indices=None) -> DiscriminativePartition:
    """
    Partitions `indices` (default: every event) by the controller's decisions.
    Returned index sets refer to rows of `dataset` and are sorted.
    """
    universe = np.arange(len(dataset)) if indices is None else np.sort(np.asarray(indices, dtype=np.int64))
    scores = controller_scores(controller, dataset.features[universe])
    selected = scores >= threshold
    correct = selected == dataset.labels[universe]
    return DiscriminativePartition(
        hit=universe[correct],
        anomalous=universe[~correct],
        selected=universe[selected],
        rejected=universe[~selected],
        universe=universe,
        controller=controller,
    )


def _swap(a: np.ndarray, b: np.ndarray, alpha: float, rng: np.random.Generator) -> tuple:
    k = math.floor(alpha * min(len(a), len(b)))
    if k == 0:
        return a, b
    pick_a = rng.choice(len(a), size=k, replace=False)
    pick_b = rng.choice(len(b), size=k, replace=False)
    new_a = np.concatenate([np.delete(a, pick_a), b[pick_b]])
    new_b = np.concatenate([np.delete(b, pick_b), a[pick_a]])
    return np.sort(new_a), np.sort(new_b)


def random_interchange(partition: DiscriminativePartition, alpha: float, seed: int) -> DiscriminativePartition:
    """Swaps floor(alpha * min(|A|, |B|)) elements each way between T/F, then between G_hat/H_hat."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}.", source=__name__)
    rng = np.random.default_rng(seed)
    hit, anomalous = _swap(partition.hit, partition.anomalous, alpha, rng)
    selected, rejected = _swap(partition.selected, partition.rejected, alpha, rng)
    return DiscriminativePartition(hit, anomalous, selected, rejected, partition.universe, partition.controller)


@dataclass(frozen=True)
class PartitionTree:
    """Leaves of a depth-n recursive partition plus the controllers that produced them."""

    leaves: list
    controllers: list
    partitions: list
    depth: int
    alpha: float
    seed: int

    def describe(self) -> list:
        lines = [f"depth = {self.depth}", f"alpha = {self.alpha!r}", f"seed = {self.seed}", f"leaves = {len(self.leaves)}"]
        lines += [f"leaf.{i} = {leaf.name} {len(leaf.indices)}" for i, leaf in enumerate(self.leaves)]
        return lines


def _check_parent(dataset: Dataset, parent: SampleSet, level: int):
    name = parent.name or "training set"
    if len(parent.indices) == 0:
        raise DataError(f"Sample set '{name}' is empty and cannot be partitioned at depth {level + 1}.", source=__name__)
    if dataset.labels is not None:
        n_signal = int(dataset.labels[parent.indices].sum())
        if n_signal == 0 or n_signal == len(parent.indices):
            raise DataError(
                f"Sample set '{name}' holds only one class and cannot be partitioned at depth {level + 1}.",
                source=__name__,
            )


def recursive_partition(dataset: Dataset, depth: int, controller_config: ControllerConfig, alpha: float, seed: int) -> PartitionTree:
    """
    Depth 1 yields {T, F, G_hat, H_hat}; depth 2 re-partitions each of them with a
    fresh controller trained on that set. Interchange is applied after every level.
    A set that is empty or holds a single class cannot be re-partitioned.
    """
    if not 1 <= depth <= MAX_DEPTH:
        raise ConfigError(f"Partition depth must be 1 or 2, got {depth}.", source=__name__)
    leaves = [SampleSet("", np.arange(len(dataset)))]
    controllers, partitions = [], []
    for level in range(depth):
        next_leaves = []
        for position, parent in enumerate(leaves):
            _check_parent(dataset, parent, level)
            config = _with_seed(controller_config, derive_seed(seed, 1, level, position))
            controller = train_controller(dataset.subset(parent.indices), config)
            partition = discriminative_partition(dataset, controller, config.threshold, indices=parent.indices)
            partition = random_interchange(partition, alpha, derive_seed(seed, 2, level, position))
            controllers.append(controller)
            partitions.append(partition)
            prefix = f"{parent.name}/" if parent.name else ""
            next_leaves.extend(partition.sample_sets(prefix))
        leaves = next_leaves
    return PartitionTree(leaves=leaves, controllers=controllers, partitions=partitions, depth=depth, alpha=alpha, seed=seed)


def _with_seed(config: ControllerConfig, seed: int) -> ControllerConfig:
    train = nn_core.TrainConfig(
        batch_size=config.train.batch_size,
        momentum=config.train.momentum,
        lr0=config.train.lr0,
        lr_decay=config.train.lr_decay,
        max_epochs=config.epochs,
        seed=seed,
        noise_rate=config.train.noise_rate,
    )
    return ControllerConfig(config.kind, config.hidden, config.epochs, config.threshold, config.tree_depth, seed, config.use_weights, train)


# --- Feature-space partition ---

@dataclass(frozen=True)
class FeaturePartition:
    names: tuple
    subsets: tuple

    def __len__(self) -> int:
        return len(self.subsets)


def _is_angle(name: str) -> bool:
    return name.endswith("_eta") or name.endswith("_phi")


def feature_partition(schema: FeatureSchema, feature_set: str = "all") -> FeaturePartition:
    """
    Overlapping feature partition.

    all:       S_1 = PRI_* momentum features, S_2 = DER_* derived features, S_3 = everything.
    primitive: S_1 = PRI_* momenta/energies/jet count, S_2 = PRI_* angles, S_3 = every PRI_* feature.
    """
    momentum = tuple(schema.indices("momentum"))
    derived = tuple(schema.indices("derived"))
    if feature_set == "all":
        names = ("momentum", "derived", "all")
        subsets = (momentum, derived, tuple(range(len(schema))))
    elif feature_set == "primitive":
        angles = tuple(i for i in momentum if _is_angle(schema.names[i]))
        energies = tuple(i for i in momentum if not _is_angle(schema.names[i]))
        names = ("primitive_momentum", "primitive_angles", "primitive")
        subsets = (energies, angles, momentum)
    else:
        raise ConfigError(f"Unknown feature set '{feature_set}'.", source=__name__)
    for name, subset in zip(names, subsets):
        if not subset:
            raise DataError(f"Feature subset '{name}' is empty for this schema.", source=__name__)
    return FeaturePartition(names=names, subsets=subsets)


# --- Sample-feature subspaces ---

@dataclass(frozen=True)
class SubspaceSpec:
    sample_set: str
    feature_set: str
    event_indices: np.ndarray
    feature_indices: tuple
    # position of the feature set inside the FeaturePartition, selects the layer schedule
    feature_position: int = 0

    @property
    def name(self) -> str:
        return f"{self.sample_set} x {self.feature_set}"


def balance_classes(indices: np.ndarray, labels: np.ndarray, floor: float, rng: np.random.Generator) -> np.ndarray:
    """Duplicates random minority-class events until the minority fraction reaches `floor`."""
    is_signal = labels[indices]
    signal, background = indices[is_signal], indices[~is_signal]
    minority = signal if len(signal) <= len(background) else background
    n, m = len(indices), len(minority)
    if m == 0:
        logger.warning("Sample set of %d events holds a single class; it cannot be balanced.", n)
        return indices
    if m / n >= floor:
        return indices
    extra = math.ceil((floor * n - m) / (1.0 - floor))
    duplicates = rng.choice(minority, size=extra, replace=True)
    return np.concatenate([indices, np.sort(duplicates)])


def build_subspaces(dataset: Dataset, sample_sets, features: FeaturePartition, balance_floor: float = 0.2, seed: int = 0) -> list:
    """
    One SubspaceSpec per (sample set, feature set), sample sets outer and feature
    sets inner, with each sample set class-balanced once.
    """
    if isinstance(sample_sets, DiscriminativePartition):
        sample_sets = sample_sets.sample_sets()
    rng = np.random.default_rng(seed)
    subspaces = []
    for sample_set in sample_sets:
        if len(sample_set.indices) == 0:
            raise DataError(f"Sample set '{sample_set.name}' is empty after interchange.", source=__name__)
        balanced = balance_classes(sample_set.indices, dataset.labels, balance_floor, rng)
        n_signal = int(dataset.labels[balanced].sum())
        for position, (feature_name, feature_indices) in enumerate(zip(features.names, features.subsets)):
            spec = SubspaceSpec(sample_set.name, feature_name, balanced, tuple(feature_indices), position)
            training_log.info(
                f"subspace {sample_set.name}x{feature_name} events {len(balanced)} signal {n_signal} features {len(feature_indices)}"
            )
            subspaces.append(spec)
    return subspaces
