"""
Extreme feature extraction: the gated-gradient and combined-loss primitives,
the per-subspace denoising feature learners, the extreme feature union with
its PCA projection, the extreme selection region and the final deep
classifier, plus the greedy pipeline that ties them together.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

import nn_core
from data_model import Dataset, NormalizationStats, apply_normalization, fit_normalization, normalize_matrix, training_weights
from errors import ConfigError, DataError, NumericError
from partition import (
    Controller,
    PartitionTree,
    SubspaceSpec,
    build_subspaces,
    controller_config_from,
    controller_scores,
    derive_seed,
    feature_partition,
    recursive_partition,
)

logger = logging.getLogger(__name__)
training_log = logging.getLogger("defe.training")

# --- Constants ---
DEFAULT_LAMBDA = 1.0
DEFAULT_DELTA = 0.1
HEAD_THRESHOLD = 0.5
# seed-derivation stage tags, so every stage draws from its own stream
_PARTITION_STAGE, _BALANCE_STAGE, _LEARNER_STAGE, _FINAL_STAGE = 1, 3, 10, 20


# --- EFE primitives ---

@dataclass(frozen=True)
class GatingVector:
    """Per-learner gates g_m(x) for a batch: shape (n_examples, n_learners), all >= 0."""

    values: np.ndarray

    def __post_init__(self):
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise DataError("Gates must be finite and nonnegative.", source=__name__)

    def __len__(self) -> int:
        return self.values.shape[-1]

    def learner(self, m: int) -> np.ndarray:
        return self.values[..., m]


def gated_gradient(net: nn_core.NetworkParams, gate, x, upstream) -> list:
    """
    Backprop gradient of a feature learner scaled by its gate.

    `gate` is a scalar or one gate per example; it never enters the forward pass.
    `upstream` is dL/dH, the loss gradient with respect to the learner's output.
    """
    gate = np.asarray(gate, dtype=np.float64)
    if np.any(gate < 0) or not np.all(np.isfinite(gate)):
        raise DataError("Gate values must be finite and nonnegative.", source=__name__)
    activations = nn_core.forward(net, np.atleast_2d(x))
    upstream = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    delta = upstream * nn_core.activation_derivative(activations[-1], net.layers[-1].activation)
    if gate.ndim == 0:
        grads = nn_core.backprop(net, activations, delta)
        g = float(gate)
        return [(g * d_w, g * d_b) for d_w, d_b in grads]
    # per-example gates scale each example's contribution
    return nn_core.backprop(net, activations, delta * gate.reshape(-1, 1))


def efe_loss(l0: float, lg: float, lam: float = DEFAULT_LAMBDA, delta: float = DEFAULT_DELTA) -> float:
    """lambda * min(L_g, delta) + L_0."""
    if not all(math.isfinite(v) for v in (l0, lg, lam, delta)):
        raise DataError("efe_loss needs finite inputs.", source=__name__)
    if lam < 0 or delta <= 0:
        raise ConfigError("efe_loss needs lambda >= 0 and delta > 0.", source=__name__)
    return lam * min(lg, delta) + l0


# --- Feature learners ---

@dataclass(frozen=True)
class FeatureLearner:
    name: str
    feature_indices: tuple
    encoder: nn_core.NetworkParams
    head: Optional[nn_core.LayerParams] = None

    @property
    def top_width(self) -> int:
        return self.encoder.output_dim

    def features(self, x) -> np.ndarray:
        """Top-layer activations for normalized full-width rows `x`."""
        return nn_core.output(self.encoder, np.atleast_2d(x)[:, list(self.feature_indices)])

    def head_scores(self, x) -> np.ndarray:
        if self.head is None:
            raise DataError(f"Feature learner '{self.name}' has no supervised head.", source=__name__)
        head = nn_core.NetworkParams((self.head,), self.head.in_dim)
        return nn_core.predict_scores(head, self.features(x))


def _labeled_arrays(dataset: Dataset, feature_indices, use_weights: bool) -> tuple:
    return (
        dataset.features[:, list(feature_indices)],
        dataset.labels,
        training_weights(dataset, use_weights),
    )


def train_feature_learner(spec: SubspaceSpec, train: Dataset, validation: Dataset, schedule, config, seed: int) -> FeatureLearner:
    """Greedy denoising pretraining on the subspace, then a fixed-length supervised fine-tune with a 1-unit head."""
    schedule = tuple(schedule)
    if not schedule or schedule[-1] != config.top_width:
        raise ConfigError(f"Subspace '{spec.name}': schedule {schedule} does not end in K={config.top_width}.", source=__name__)
    n_features = train.features.shape[1]
    if not spec.feature_indices or max(spec.feature_indices) >= n_features:
        raise DataError(f"Subspace '{spec.name}': feature indices do not fit {n_features} input features.", source=__name__)
    features = list(spec.feature_indices)
    x = train.features[spec.event_indices][:, features]
    y = train.labels[spec.event_indices]
    w = training_weights(train, config.finetune_weighted)[spec.event_indices]

    training_log.info(f"stage learner {spec.sample_set}x{spec.feature_set} input {len(features)} schedule {','.join(map(str, schedule))}")
    encoder = nn_core.pretrain_stack(x, schedule, nn_core.train_config_from(config, config.pretrain_epochs, seed))
    head = nn_core.init_layer(schedule[-1], 1, "sigmoid", None, zero=True)
    net = nn_core.finetune(
        encoder.extend(head),
        (x, y, w),
        _labeled_arrays(validation, features, config.finetune_weighted),
        nn_core.train_config_from(config, config.finetune_epochs, derive_seed(seed, 1)),
        early_stop=None,
        epoch_cap=config.finetune_epochs,
    )
    return FeatureLearner(spec.name, spec.feature_indices, net.truncate(len(schedule)), net.layers[-1])


def train_feature_learners(subspaces: list, train: Dataset, validation: Dataset, config) -> list:
    """
    One learner per subspace, in subspace order. With `config.workers > 1` the
    learners train concurrently; results are still collected in that order.
    """
    if not subspaces:
        raise DataError("No subspaces to train feature learners on.", source=__name__)
    jobs = [
        (spec, config.schedules[spec.feature_position], derive_seed(config.seed, _LEARNER_STAGE, h))
        for h, spec in enumerate(subspaces)
    ]

    def run(job):
        spec, schedule, seed = job
        return train_feature_learner(spec, train, validation, schedule, config, seed)

    if config.workers <= 1:
        return [run(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        return list(pool.map(run, jobs))


def extract_extreme_features(learners: list, x) -> np.ndarray:
    """Every learner's top layer for every event, concatenated in learner order."""
    if isinstance(x, Dataset):
        x = x.features
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return np.hstack([learner.features(x) for learner in learners])


def extreme_region_member(learners: list, x):
    """True where any learner's head scores >= 0.5 (the union of their selection regions)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    scores = np.column_stack([learner.head_scores(x) for learner in learners])
    member = np.any(scores >= HEAD_THRESHOLD, axis=1)
    return bool(member[0]) if single else member


def expansion_coverage(learners: list, controller: Controller, dataset: Dataset, threshold: float = 0.5) -> tuple:
    """Signal events covered by the controller's selection region and by the extreme selection region."""
    signal = dataset.features[dataset.labels]
    controller_hits = int(np.sum(controller_scores(controller, signal) >= threshold))
    extreme_hits = int(np.sum(extreme_region_member(learners, signal)))
    return controller_hits, extreme_hits


@dataclass(frozen=True)
class DiversityReport:
    between_learners: float
    within_learner: float


def diversity_report(learners: list, x) -> DiversityReport:
    """Mean |Pearson correlation| between features of different learners vs. within one learner."""
    features = extract_extreme_features(learners, x)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.abs(np.corrcoef(features, rowvar=False))
    block = np.repeat(np.arange(len(learners)), [learner.top_width for learner in learners])
    same = block[:, None] == block[None, :]
    off_diagonal = ~np.eye(len(block), dtype=bool)
    between = float(np.nanmean(corr[~same])) if np.any(~same) else float("nan")
    within = float(np.nanmean(corr[same & off_diagonal])) if np.any(same & off_diagonal) else float("nan")
    return DiversityReport(between_learners=between, within_learner=within)


# --- PCA ---

@dataclass(frozen=True)
class PCAProjection:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def k(self) -> int:
        return self.components.shape[0]


def fit_pca(matrix, k: int) -> PCAProjection:
    """
    Principal components of the sample covariance by exact eigendecomposition.
    Each component is signed so its largest-magnitude coordinate is positive.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    n, d = matrix.shape
    if k < 1 or k > d:
        raise DataError(f"PCA needs 1 <= k <= input dim ({d}), got k={k}.", source=__name__)
    if d > n:
        raise DataError(f"PCA needs at least as many samples ({n}) as dimensions ({d}).", source=__name__)
    if not np.all(np.isfinite(matrix)):
        raise NumericError("PCA input holds non-finite values.", source=__name__)
    mean = matrix.mean(axis=0)
    centered = matrix - mean
    covariance = centered.T @ centered / max(n - 1, 1)
    try:
        eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"PCA eigendecomposition failed: {e}", source=__name__) from e
    order = np.argsort(-eigenvalues, kind="stable")
    eigenvalues, eigenvectors = eigenvalues[order], eigenvectors[:, order]
    # same cut-off as numpy.linalg.matrix_rank
    tolerance = max(eigenvalues[0], 0.0) * max(n, d) * np.finfo(np.float64).eps
    rank = int(np.sum(eigenvalues > tolerance))
    if k > rank:
        raise DataError(f"PCA asked for {k} components but the effective rank is {rank}.", source=__name__)
    components = eigenvectors[:, :k].T.copy()
    pivots = np.argmax(np.abs(components), axis=1)
    components *= np.sign(components[np.arange(k), pivots])[:, None]
    return PCAProjection(mean=mean, components=components, explained_variance=np.maximum(eigenvalues[:k], 0.0))


def apply_pca(projection: PCAProjection, vectors) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    return (vectors - projection.mean) @ projection.components.T


def inverse_pca(projection: PCAProjection, reduced) -> np.ndarray:
    return np.asarray(reduced, dtype=np.float64) @ projection.components + projection.mean


# --- Final classifier ---

def train_final_classifier(features, labels, weights, config, validation: tuple, seed: Optional[int] = None) -> nn_core.NetworkParams:
    """
    Deep sigmoid classifier (hidden `final_layers`, one output unit with a zero-initialized
    head) trained with weighted cross-entropy and early stopping.
    """
    features = np.asarray(features, dtype=np.float64)
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    net = nn_core.init_network(features.shape[1], list(config.final_layers) + [1], rng, zero_head=True)
    training_log.info(f"stage classifier input {features.shape[1]} layers {','.join(map(str, config.final_layers))}")
    return nn_core.finetune(
        net,
        (features, labels, weights),
        validation,
        nn_core.train_config_from(config, config.final_epochs, derive_seed(seed, 1)),
        early_stop=nn_core.early_stop_from(config),
        epoch_cap=config.final_epochs,
    )


def train_baseline(train: Dataset, validation: Dataset, config, feature_indices=None) -> nn_core.NetworkParams:
    """The plain DNN comparison: same classifier and training rule on normalized raw inputs."""
    feature_indices = list(range(train.features.shape[1])) if feature_indices is None else list(feature_indices)
    x, y, w = _labeled_arrays(train, feature_indices, config.finetune_weighted)
    return train_final_classifier(
        x, y, w, config, _labeled_arrays(validation, feature_indices, config.finetune_weighted),
        seed=derive_seed(config.seed, _FINAL_STAGE),
    )


# --- The DEFE model ---

@dataclass(frozen=True)
class DEFEModel:
    stats: NormalizationStats
    controllers: list
    partition_lines: list
    learners: list
    pca: Optional[PCAProjection]
    classifier: nn_core.NetworkParams
    config: object = field(repr=False)

    def extreme_features(self, normalized) -> np.ndarray:
        return extract_extreme_features(self.learners, normalized)

    def classifier_inputs(self, normalized) -> np.ndarray:
        extreme = self.extreme_features(normalized)
        return extreme if self.pca is None else apply_pca(self.pca, extreme)


def predict(model: DEFEModel, raw_features):
    """
    Score raw events: impute, normalize, extract extreme features, PCA, classify.
    A single 30-vector gives a float, a matrix gives one score per row.
    """
    raw = np.asarray(raw_features, dtype=np.float64)
    single = raw.ndim == 1
    normalized = normalize_matrix(model.stats, np.atleast_2d(raw))
    scores = nn_core.predict_scores(model.classifier, model.classifier_inputs(normalized))
    return float(scores[0]) if single else scores


def train_defe(train: Dataset, validation: Dataset, config) -> DEFEModel:
    """
    The greedy DEFE pipeline on raw (unnormalized) labeled datasets:
    controller partition and interchange, feature partition, one denoising learner
    per subspace, extreme feature union, PCA, final classifier.
    """
    stats = fit_normalization(train)
    train_n = apply_normalization(train, stats)
    validation_n = apply_normalization(validation, stats)

    tree: PartitionTree = recursive_partition(
        train_n,
        config.partition_depth,
        controller_config_from(config, derive_seed(config.seed, _PARTITION_STAGE)),
        config.alpha,
        derive_seed(config.seed, _PARTITION_STAGE, 1),
    )
    features = feature_partition(train.schema, config.feature_set)
    subspaces = build_subspaces(train_n, tree.leaves, features, config.balance_floor, derive_seed(config.seed, _BALANCE_STAGE))
    learners = train_feature_learners(subspaces, train_n, validation_n, config)

    extreme_train = extract_extreme_features(learners, train_n)
    extreme_validation = extract_extreme_features(learners, validation_n)
    pca = None
    if config.pca_enabled:
        pca = fit_pca(extreme_train, config.pca_components)
        extreme_train, extreme_validation = apply_pca(pca, extreme_train), apply_pca(pca, extreme_validation)
        training_log.info(f"stage pca {pca.mean.shape[0]} -> {pca.k}")

    controller_hits, extreme_hits = expansion_coverage(learners, tree.controllers[0], train_n, config.controller_threshold)
    training_log.info(f"coverage controller {controller_hits} extreme {extreme_hits}")
    diversity = diversity_report(learners, validation_n)
    training_log.info(f"diversity between {diversity.between_learners:.6f} within {diversity.within_learner:.6f}")

    classifier = train_final_classifier(
        extreme_train,
        train_n.labels,
        training_weights(train_n, config.finetune_weighted),
        config,
        (extreme_validation, validation_n.labels, training_weights(validation_n, config.finetune_weighted)),
        seed=derive_seed(config.seed, _FINAL_STAGE),
    )
    return DEFEModel(
        stats=stats,
        controllers=list(tree.controllers),
        partition_lines=tree.describe(),
        learners=learners,
        pca=pca,
        classifier=classifier,
        config=config,
    )


# --- Gated end-to-end training (toy scale) ---

@dataclass(frozen=True)
class GatedEnsemble:
    learners: list
    gate: nn_core.NetworkParams
    output: nn_core.NetworkParams
    history: list


def train_gated_ensemble(x, labels, hidden=(8, 4), epochs: int = 50, train_config: nn_core.TrainConfig = None, lam: float = DEFAULT_LAMBDA, delta: float = DEFAULT_DELTA) -> GatedEnsemble:
    """
    Trains two feature learners, a gate controller and a logistic output jointly on L_EFE.

    The gate q(x) yields the gating vector (q, 1 - q); it does not enter the forward pass.
    Learner m receives the output loss gradient scaled by g_m(x); the gate learns from
    lambda * min(L_g, delta) only, so it stops receiving gradient once L_g exceeds delta.
    """
    train_config = train_config or nn_core.TrainConfig(batch_size=20, momentum=0.5, lr0=0.5, lr_decay=1.0, noise_rate=0.0)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    rng = np.random.default_rng(train_config.seed)
    learners = [nn_core.init_network(x.shape[1], hidden, rng) for _ in range(2)]
    gate = nn_core.init_network(x.shape[1], [hidden[0], 1], rng)
    output = nn_core.init_network(2 * hidden[-1], [1], rng, zero_head=True)
    velocities = {"learners": [None, None], "gate": None, "output": None}
    history = []

    for epoch in range(epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), train_config.batch_size):
            idx = order[start:start + train_config.batch_size]
            xb, yb = x[idx], y[idx]
            n = len(idx)
            ones = np.ones(n)

            q = nn_core.predict_scores(gate, xb)
            gates = GatingVector(np.column_stack([q, 1.0 - q]))
            codes = [nn_core.output(learner, xb) for learner in learners]
            joined = np.hstack(codes)

            l0, output_grads = nn_core.loss_and_gradients(output, joined, yb, ones, nn_core.WEIGHTED_CROSS_ENTROPY)
            lg, gate_grads = nn_core.loss_and_gradients(gate, xb, yb, ones, nn_core.WEIGHTED_CROSS_ENTROPY)
            total += efe_loss(l0, lg, lam, delta) * n

            p = nn_core.predict_scores(output, joined)
            upstream = ((p - yb) / n)[:, None] @ output.layers[0].weight
            width = hidden[-1]
            for m, learner in enumerate(learners):
                grads = gated_gradient(learner, gates.learner(m), xb, upstream[:, m * width:(m + 1) * width])
                learners[m], velocities["learners"][m] = nn_core.sgd_step(learner, grads, velocities["learners"][m], epoch, train_config)

            output, velocities["output"] = nn_core.sgd_step(output, output_grads, velocities["output"], epoch, train_config)
            gate_scale = lam if lg < delta else 0.0
            gate_grads = [(gate_scale * d_w, gate_scale * d_b) for d_w, d_b in gate_grads]
            gate, velocities["gate"] = nn_core.sgd_step(gate, gate_grads, velocities["gate"], epoch, train_config)
        history.append(total / len(x))
    return GatedEnsemble(learners=learners, gate=gate, output=output, history=history)
