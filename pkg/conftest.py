import numpy as np
import pytest

from config import RunConfig
from data_model import MISSING_SENTINEL, Dataset, default_schema, write_events

# DER columns that carry the -999.0 sentinel in the synthetic data
MISSING_COLUMNS = (0, 4, 5, 6)


def make_events(n: int, seed: int = 0, signal_fraction: float = 0.4, missing_rate: float = 0.1) -> Dataset:
    """
    Synthetic events in the 30-feature challenge schema. Signal is shifted in
    every feature so both classes are separable but overlapping; challenge-like
    weights are small for signal and large for background.
    """
    rng = np.random.default_rng(seed)
    schema = default_schema()
    labels = rng.random(n) < signal_fraction
    shift = np.linspace(0.3, 1.5, len(schema))
    features = rng.normal(size=(n, len(schema))) + labels[:, None] * shift
    for column in MISSING_COLUMNS:
        features[rng.random(n) < missing_rate, column] = MISSING_SENTINEL
    weights = np.where(labels, rng.uniform(0.001, 0.01, n), rng.uniform(0.5, 5.0, n))
    return Dataset(
        ids=100000 + np.arange(n, dtype=np.int64),
        features=features,
        labels=labels,
        weights=weights,
        missing=features == MISSING_SENTINEL,
        schema=schema,
    )


def write_csv(dataset: Dataset, path) -> str:
    write_events(dataset, str(path))
    return str(path)


def tiny_config(**overrides) -> RunConfig:
    """The default pipeline shape (depth 1, three feature sets) at toy widths and epochs."""
    values = dict(
        controller_kind="tree",
        controller_hidden=6,
        controller_epochs=2,
        schedule_s1=(8, 4),
        schedule_s2=(6, 4),
        schedule_s3=(8, 4),
        top_width=4,
        pretrain_epochs=2,
        finetune_epochs=2,
        pca_components=10,
        final_layers=(8,),
        final_epochs=4,
        batch_size=25,
    )
    values.update(overrides)
    return RunConfig(**values)


@pytest.fixture
def events():
    return make_events(400, seed=7)


@pytest.fixture
def small_config():
    return tiny_config()


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "defe.conf"
    lines = [f"{key} = {value}" for key, value in {
        "controller_kind": "tree",
        "schedule_s1": "8,4",
        "schedule_s2": "6,4",
        "schedule_s3": "8,4",
        "top_width": "4",
        "pretrain_epochs": "2",
        "finetune_epochs": "2",
        "pca_components": "10",
        "final_layers": "8",
        "final_epochs": "4",
        "batch_size": "25",
    }.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)
