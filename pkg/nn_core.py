"""
Dense feedforward networks written directly against numpy.

Covers the forward pass, hand-derived backprop for the two losses DEFE needs,
momentum SGD with an epoch-decayed learning rate, masking noise, greedy
layerwise denoising-autoencoder pretraining and early-stopped fine-tuning.

Batches are row-major: `x` has shape (n_examples, n_features) and a layer
weight has shape (out_dim, in_dim).
"""
import logging
import math
import os
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.special import expit

from errors import ConfigError, DataError, NumericError

logger = logging.getLogger(__name__)
training_log = logging.getLogger("defe.training")

# --- Constants ---
ACTIVATIONS = ("sigmoid", "linear")
WEIGHTED_CROSS_ENTROPY = "weighted_cross_entropy"
SQUARED_RECONSTRUCTION = "squared_reconstruction"
LOSS_KINDS = (WEIGHTED_CROSS_ENTROPY, SQUARED_RECONSTRUCTION)
# keeps sigmoid outputs strictly inside (0, 1) so the cross-entropy stays finite
SIGMOID_EPS = 1e-12
PARAM_DTYPE = np.dtype("<f8")
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class LayerParams:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "sigmoid"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"Unknown activation '{self.activation}'.", source=__name__)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DataError(
                f"Layer weight {self.weight.shape} and bias {self.bias.shape} are inconsistent.", source=__name__
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class NetworkParams:
    layers: tuple
    input_dim: int

    def __post_init__(self):
        width = self.input_dim
        for i, layer in enumerate(self.layers):
            if layer.in_dim != width:
                raise DataError(
                    f"Layer {i} expects input dim {layer.in_dim}, previous width is {width}.", source=__name__
                )
            width = layer.out_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim if self.layers else self.input_dim

    @property
    def sizes(self) -> list:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    def truncate(self, n_layers: int) -> "NetworkParams":
        return NetworkParams(tuple(self.layers[:n_layers]), self.input_dim)

    def extend(self, *layers: LayerParams) -> "NetworkParams":
        return NetworkParams(tuple(self.layers) + tuple(layers), self.input_dim)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    momentum: float = 0.5
    lr0: float = 0.1
    lr_decay: float = 0.997
    max_epochs: int = 10
    seed: int = 0
    noise_rate: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1.", source=__name__)
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1).", source=__name__)
        if self.lr0 <= 0.0:
            raise ConfigError("lr0 must be positive.", source=__name__)
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError("lr_decay must lie in (0, 1].", source=__name__)
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ConfigError("noise_rate must lie in [0, 1].", source=__name__)


def train_config_from(run_config, max_epochs: int, seed: int) -> TrainConfig:
    """Shared SGD settings of a RunConfig with a stage-specific epoch budget and seed."""
    return TrainConfig(
        batch_size=run_config.batch_size,
        momentum=run_config.momentum,
        lr0=run_config.lr0,
        lr_decay=run_config.lr_decay,
        max_epochs=max_epochs,
        seed=seed,
        noise_rate=run_config.noise_rate,
    )


@dataclass
class EarlyStopState:
    """
    Stop when the validation error rises `abs_rise` above its minimum, or when the
    training cost has stayed within `cost_eps` of the previous epoch's cost for
    `patience` consecutive epochs (the first epoch of such a run included).
    """

    abs_rise: float = 0.002
    cost_eps: float = 0.0001
    patience: int = 10
    best_error: float = math.inf
    best_epoch: int = -1
    plateau_epochs: int = 0
    last_cost: Optional[float] = None
    stop_reason: Optional[str] = None

    def update(self, epoch: int, val_error: float, cost: float) -> Optional[str]:
        if val_error < self.best_error:
            self.best_error = val_error
            self.best_epoch = epoch
        if self.last_cost is not None and abs(cost - self.last_cost) < self.cost_eps:
            self.plateau_epochs += 1
        else:
            self.plateau_epochs = 1
        self.last_cost = cost

        if val_error > self.best_error + self.abs_rise:
            self.stop_reason = "validation_rise"
        elif self.plateau_epochs >= self.patience:
            self.stop_reason = "cost_plateau"
        return self.stop_reason


def early_stop_from(run_config) -> EarlyStopState:
    return EarlyStopState(
        abs_rise=run_config.early_stop_rise,
        cost_eps=run_config.early_stop_cost_eps,
        patience=run_config.early_stop_patience,
    )


# --- Construction ---

def init_layer(in_dim: int, out_dim: int, activation: str, rng: np.random.Generator, zero: bool = False) -> LayerParams:
    """Uniform init in +-sqrt(6/(fan_in+fan_out)), scaled by 4 for sigmoid layers."""
    if zero:
        return LayerParams(np.zeros((out_dim, in_dim)), np.zeros(out_dim), activation)
    bound = math.sqrt(6.0 / (in_dim + out_dim))
    if activation == "sigmoid":
        bound *= 4.0
    weight = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    return LayerParams(weight, np.zeros(out_dim), activation)


def init_network(input_dim: int, sizes, rng: np.random.Generator, activation: str = "sigmoid", zero_head: bool = False) -> NetworkParams:
    layers = []
    width = input_dim
    for i, size in enumerate(sizes):
        is_head = i == len(sizes) - 1
        layers.append(init_layer(width, size, activation, rng, zero=zero_head and is_head))
        width = size
    return NetworkParams(tuple(layers), input_dim)


# --- Forward and backward passes ---

def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "sigmoid":
        return np.clip(expit(z), SIGMOID_EPS, 1.0 - SIGMOID_EPS)
    return z


def activation_derivative(a: np.ndarray, activation: str) -> np.ndarray:
    if activation == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(a)


def forward(net: NetworkParams, x) -> list:
    """
    Returns the activations of every layer, input first and output last.
    A 1-D `x` is treated as a single example and 1-D activations are returned.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.shape[1] != net.input_dim:
        raise DataError(f"Network expects input dim {net.input_dim}, got {batch.shape[1]}.", source=__name__)
    activations = [batch]
    for layer in net.layers:
        activations.append(_activate(activations[-1] @ layer.weight.T + layer.bias, layer.activation))
    if single:
        return [a[0] for a in activations]
    return activations


def output(net: NetworkParams, x) -> np.ndarray:
    return forward(net, x)[-1]


def predict_scores(net: NetworkParams, x) -> np.ndarray:
    """Scores of a single-output network, one per row of `x`."""
    return forward(net, np.atleast_2d(x))[-1][:, 0]


def backprop(net: NetworkParams, activations: list, output_delta: np.ndarray) -> list:
    """
    Gradients for every layer given dL/dz of the output layer.

    Returns a list congruent with `net.layers` of `(d_weight, d_bias)` pairs.
    """
    grads = [None] * len(net.layers)
    delta = output_delta
    for i in reversed(range(len(net.layers))):
        grads[i] = (delta.T @ activations[i], delta.sum(axis=0))
        if i > 0:
            delta = (delta @ net.layers[i].weight) * activation_derivative(activations[i], net.layers[i - 1].activation)
    return grads


def loss_and_gradients(net: NetworkParams, inputs, targets, weights, loss_kind: str) -> tuple:
    """
    Loss averaged over the batch, each example multiplied by its weight.

    weighted_cross_entropy:  -(1/n) sum_i w_i [t log p + (1 - t) log(1 - p)]   (sigmoid output)
    squared_reconstruction:  (1/n) sum_i w_i 0.5 ||a_i - t_i||^2
    """
    if loss_kind not in LOSS_KINDS:
        raise ConfigError(f"Unknown loss kind '{loss_kind}'.", source=__name__)
    activations = forward(net, np.atleast_2d(inputs))
    out = activations[-1]
    n = out.shape[0]
    targets = np.asarray(targets, dtype=np.float64).reshape(out.shape)
    w = np.asarray(weights, dtype=np.float64).reshape(n, 1)
    last = net.layers[-1].activation

    if loss_kind == WEIGHTED_CROSS_ENTROPY:
        if last != "sigmoid":
            raise ConfigError("weighted_cross_entropy needs a sigmoid output layer.", source=__name__)
        per_example = -(targets * np.log(out) + (1.0 - targets) * np.log1p(-out))
        loss = float(np.sum(w * per_example) / n)
        output_delta = w * (out - targets) / n
    else:
        diff = out - targets
        loss = float(0.5 * np.sum(w * diff * diff) / n)
        output_delta = w * diff / n * activation_derivative(out, last)
    return loss, backprop(net, activations, output_delta)


# --- Optimization ---

def learning_rate(epoch: int, config: TrainConfig) -> float:
    return config.lr0 * config.lr_decay ** epoch


def zero_velocity(net: NetworkParams) -> list:
    return [(np.zeros_like(layer.weight), np.zeros_like(layer.bias)) for layer in net.layers]


def sgd_step(net: NetworkParams, grads: list, velocity: Optional[list], epoch: int, config: TrainConfig) -> tuple:
    """v <- momentum * v - lr(epoch) * g;  theta <- theta + v."""
    if velocity is None:
        velocity = zero_velocity(net)
    if len(grads) != len(net.layers) or len(velocity) != len(net.layers):
        raise DataError("Gradient structure does not match the network.", source=__name__)
    lr = learning_rate(epoch, config)
    new_layers, new_velocity = [], []
    for layer, (g_w, g_b), (v_w, v_b) in zip(net.layers, grads, velocity):
        if g_w.shape != layer.weight.shape or g_b.shape != layer.bias.shape:
            raise DataError("Gradient shape does not match the layer.", source=__name__)
        v_w = config.momentum * v_w - lr * g_w
        v_b = config.momentum * v_b - lr * g_b
        weight, bias = layer.weight + v_w, layer.bias + v_b
        if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
            raise NumericError("SGD step produced non-finite parameters.", source=__name__)
        new_layers.append(replace(layer, weight=weight, bias=bias))
        new_velocity.append((v_w, v_b))
    return NetworkParams(tuple(new_layers), net.input_dim), new_velocity


def corrupt(x, noise_rate: float, seed) -> np.ndarray:
    """Masking noise: every coordinate is zeroed independently with probability `noise_rate`."""
    if not 0.0 <= noise_rate <= 1.0:
        raise ConfigError("noise_rate must lie in [0, 1].", source=__name__)
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return x * (rng.random(x.shape) >= noise_rate)


def train_epoch(net, inputs, targets, weights, loss_kind, velocity, epoch, config: TrainConfig, rng, noise_rate: float = 0.0) -> tuple:
    """One shuffled pass of minibatch SGD. Returns (net, velocity, mean batch loss)."""
    n = len(inputs)
    order = rng.permutation(n)
    total = 0.0
    for start in range(0, n, config.batch_size):
        idx = order[start:start + config.batch_size]
        batch = inputs[idx]
        if noise_rate > 0.0:
            batch = corrupt(batch, noise_rate, rng)
        loss, grads = loss_and_gradients(net, batch, targets[idx], weights[idx], loss_kind)
        if not math.isfinite(loss):
            raise NumericError(f"Non-finite loss at epoch {epoch}.", source=__name__)
        net, velocity = sgd_step(net, grads, velocity, epoch, config)
        total += loss * len(idx)
    return net, velocity, total / max(n, 1)


def reconstruction_error(autoencoder: NetworkParams, data) -> float:
    data = np.asarray(data, dtype=np.float64)
    diff = output(autoencoder, data) - data
    return float(0.5 * np.sum(diff * diff) / len(data))


def train_denoising_layer(data, size: int, config: TrainConfig, rng, decoder_activation: str = "sigmoid", layer_index: int = 0) -> tuple:
    """
    Trains one denoising autoencoder (corrupt -> encode -> decode) on `data`.

    Returns:
        (encoder LayerParams, decoder LayerParams, history) where history[0] is the
        clean reconstruction loss before training and history[k] the mean loss of epoch k.
    """
    data = np.asarray(data, dtype=np.float64)
    in_dim = data.shape[1]
    encoder = init_layer(in_dim, size, "sigmoid", rng)
    decoder = init_layer(size, in_dim, decoder_activation, rng)
    autoencoder = NetworkParams((encoder, decoder), in_dim)
    ones = np.ones(len(data))
    history = [reconstruction_error(autoencoder, data)]
    velocity = None
    training_log.info(f"stage pretrain layer {layer_index} width {size}")
    for epoch in range(config.max_epochs):
        try:
            autoencoder, velocity, loss = train_epoch(
                autoencoder, data, data, ones, SQUARED_RECONSTRUCTION, velocity, epoch, config, rng,
                noise_rate=config.noise_rate,
            )
        except NumericError as e:
            raise NumericError(f"Pretraining layer {layer_index} diverged: {e}", source=__name__) from e
        history.append(loss)
        training_log.info(f"epoch {epoch} loss {loss:.6f}")
    return autoencoder.layers[0], autoencoder.layers[1], history


def pretrain_stack(data, layer_sizes, config: TrainConfig) -> NetworkParams:
    """
    Greedy layerwise pretraining. Layer j is a denoising autoencoder trained on the
    clean activations of layers < j; decoders are discarded.
    """
    data = np.asarray(data, dtype=np.float64)
    if len(layer_sizes) == 0:
        raise ConfigError("pretrain_stack needs at least one layer size.", source=__name__)
    if len(data) == 0:
        raise DataError("pretrain_stack needs at least one example.", source=__name__)
    rng = np.random.default_rng(config.seed)
    hidden = data
    encoders = []
    for j, size in enumerate(layer_sizes):
        # the first layer reconstructs real-valued inputs, deeper layers reconstruct sigmoid codes
        decoder_activation = "linear" if j == 0 else "sigmoid"
        encoder, _, _ = train_denoising_layer(hidden, size, config, rng, decoder_activation, layer_index=j)
        encoders.append(encoder)
        hidden = _activate(hidden @ encoder.weight.T + encoder.bias, encoder.activation)
    return NetworkParams(tuple(encoders), data.shape[1])


def classification_error(net: NetworkParams, inputs, labels, weights) -> float:
    """Weighted misclassification rate at threshold 0.5."""
    predicted = predict_scores(net, inputs) >= 0.5
    wrong = predicted != np.asarray(labels, dtype=bool)
    return float(np.sum(weights * wrong) / np.sum(weights))


def finetune(net: NetworkParams, train: tuple, validation: tuple, config: TrainConfig, early_stop: Optional[EarlyStopState] = None, epoch_cap: Optional[int] = None) -> NetworkParams:
    """
    Supervised weighted cross-entropy training of a single-sigmoid-output network.

    Args:
        train, validation: `(inputs, labels, weights)` triples.
        early_stop (EarlyStopState, optional): When given, training stops by its rule and the
            parameters of the best-validation epoch are returned; without it exactly
            `epoch_cap` epochs run and the final parameters are returned.
        epoch_cap (int, optional): Defaults to `config.max_epochs`.
    """
    x_train, y_train, w_train = train
    x_val, y_val, w_val = validation
    if len(x_val) == 0:
        raise DataError("finetune needs a nonempty validation split.", source=__name__)
    if net.output_dim != 1 or net.layers[-1].activation != "sigmoid":
        raise ConfigError("finetune needs a single sigmoid output unit.", source=__name__)
    cap = config.max_epochs if epoch_cap is None else epoch_cap
    rng = np.random.default_rng(config.seed)
    targets = np.asarray(y_train, dtype=np.float64)
    velocity = None
    best = net
    for epoch in range(cap):
        net, velocity, cost = train_epoch(net, x_train, targets, w_train, WEIGHTED_CROSS_ENTROPY, velocity, epoch, config, rng)
        val_error = classification_error(net, x_val, y_val, w_val)
        training_log.info(f"epoch {epoch} loss {cost:.6f} val {val_error:.6f}")
        if early_stop is None:
            best = net
            continue
        reason = early_stop.update(epoch, val_error, cost)
        if early_stop.best_epoch == epoch:
            best = net
        if reason:
            training_log.info(f"stop epoch {epoch} reason {reason}")
            return best
    if early_stop is not None:
        early_stop.stop_reason = "epoch_cap"
    training_log.info(f"stop epoch {cap} reason epoch_cap")
    return best


# --- Serialization ---

def save_network(net: NetworkParams, directory: str, name: str, metadata: Optional[dict] = None) -> str:
    """
    Writes `<name>.manifest` plus one raw little-endian float64 file per layer
    (weights row-major, then bias).
    """
    os.makedirs(directory, exist_ok=True)
    lines = [f"network {MANIFEST_VERSION}", f"input_dim = {net.input_dim}", f"layers = {len(net.layers)}"]
    for key, value in (metadata or {}).items():
        lines.append(f"meta.{key} = {value}")
    for i, layer in enumerate(net.layers):
        filename = f"{name}_layer_{i}.bin"
        lines.append(f"layer.{i} = {layer.in_dim} {layer.out_dim} {layer.activation} {filename}")
        payload = np.concatenate([layer.weight.ravel(), layer.bias]).astype(PARAM_DTYPE)
        with open(os.path.join(directory, filename), "wb") as f:
            f.write(payload.tobytes())
    manifest_path = os.path.join(directory, f"{name}.manifest")
    with open(manifest_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return manifest_path


def load_network(directory: str, name: str) -> tuple:
    """Reads a network written by `save_network`. Returns (NetworkParams, metadata)."""
    manifest_path = os.path.join(directory, f"{name}.manifest")
    if not os.path.exists(manifest_path):
        raise DataError(f"Network manifest '{manifest_path}' was not found.", source=__name__)
    with open(manifest_path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != f"network {MANIFEST_VERSION}":
        raise DataError(f"Unsupported network manifest header in '{manifest_path}'.", source=__name__)
    entries = dict(line.split(" = ", 1) for line in lines[1:] if " = " in line)
    metadata = {key[len("meta."):]: value for key, value in entries.items() if key.startswith("meta.")}
    layers = []
    for i in range(int(entries["layers"])):
        in_dim, out_dim, activation, filename = entries[f"layer.{i}"].split()
        in_dim, out_dim = int(in_dim), int(out_dim)
        payload = np.fromfile(os.path.join(directory, filename), dtype=PARAM_DTYPE).astype(np.float64)
        if payload.size != out_dim * in_dim + out_dim:
            raise DataError(f"Parameter file '{filename}' has the wrong size.", source=__name__)
        weight = payload[: out_dim * in_dim].reshape(out_dim, in_dim)
        layers.append(LayerParams(weight, payload[out_dim * in_dim:].copy(), activation))
    return NetworkParams(tuple(layers), int(entries["input_dim"])), metadata
