"""
Weighted event datasets in the Higgs challenge CSV schema: ingestion,
class weight normalization, median imputation + z-scoring, seeded splits.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, TextIO, Union

import numpy as np
import pandas as pd

from errors import DataError, ParseError, SchemaError

logger = logging.getLogger(__name__)

# --- Constants ---
MISSING_SENTINEL = -999.0
ID_COLUMN = "EventId"
WEIGHT_COLUMN = "Weight"
LABEL_COLUMN = "Label"

DERIVED_FEATURES = (
    "DER_mass_MMC",
    "DER_mass_transverse_met_lep",
    "DER_mass_vis",
    "DER_pt_h",
    "DER_deltaeta_jet_jet",
    "DER_mass_jet_jet",
    "DER_prodeta_jet_jet",
    "DER_deltar_tau_lep",
    "DER_pt_tot",
    "DER_sum_pt",
    "DER_pt_ratio_lep_tau",
    "DER_met_phi_centrality",
    "DER_lep_eta_centrality",
)
PRIMITIVE_FEATURES = (
    "PRI_tau_pt",
    "PRI_tau_eta",
    "PRI_tau_phi",
    "PRI_lep_pt",
    "PRI_lep_eta",
    "PRI_lep_phi",
    "PRI_met",
    "PRI_met_phi",
    "PRI_met_sumet",
    "PRI_jet_num",
    "PRI_jet_leading_pt",
    "PRI_jet_leading_eta",
    "PRI_jet_leading_phi",
    "PRI_jet_subleading_pt",
    "PRI_jet_subleading_eta",
    "PRI_jet_subleading_phi",
    "PRI_jet_all_pt",
)


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple
    groups: dict

    def __post_init__(self):
        if len(self.names) != len(set(self.names)):
            raise SchemaError("Feature names must be unique.", source=__name__)
        missing = [name for name in self.names if self.groups.get(name) not in ("momentum", "derived")]
        if missing:
            raise SchemaError(f"Features without a momentum/derived group: {missing}", source=__name__)

    def __len__(self) -> int:
        return len(self.names)

    def indices(self, group: str) -> list:
        return [i for i, name in enumerate(self.names) if self.groups[name] == group]


def default_schema() -> FeatureSchema:
    """The 30-feature challenge schema: 13 DER_* (derived) then 17 PRI_* (momentum)."""
    names = DERIVED_FEATURES + PRIMITIVE_FEATURES
    groups = {name: ("derived" if name.startswith("DER_") else "momentum") for name in names}
    return FeatureSchema(names=names, groups=groups)


@dataclass(frozen=True)
class Event:
    id: int
    features: np.ndarray
    label: Optional[str]
    weight: float
    missing: np.ndarray


@dataclass(frozen=True)
class Dataset:
    """
    An immutable, ordered collection of events stored column-wise.

    `labels` is a boolean signal mask (None for unlabeled files). `missing` flags
    cells that held the -999.0 sentinel in the source file.
    """

    ids: np.ndarray
    features: np.ndarray
    labels: Optional[np.ndarray]
    weights: np.ndarray
    missing: np.ndarray
    schema: FeatureSchema
    n_s_expected: float = 0.0
    n_b_expected: float = 0.0

    def __post_init__(self):
        for array in (self.ids, self.features, self.weights, self.missing, self.labels):
            if array is not None:
                array.setflags(write=False)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    def event(self, i: int) -> Event:
        label = None if self.labels is None else ("s" if self.labels[i] else "b")
        return Event(int(self.ids[i]), self.features[i], label, float(self.weights[i]), self.missing[i])

    def events(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self.event(i)

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            ids=self.ids[indices],
            features=self.features[indices],
            labels=None if self.labels is None else self.labels[indices],
            weights=self.weights[indices],
            missing=self.missing[indices],
        )

    def columns(self, feature_indices) -> "Dataset":
        feature_indices = list(feature_indices)
        names = tuple(self.schema.names[i] for i in feature_indices)
        schema = FeatureSchema(names=names, groups={name: self.schema.groups[name] for name in names})
        return replace(
            self,
            features=self.features[:, feature_indices],
            missing=self.missing[:, feature_indices],
            schema=schema,
        )


@dataclass(frozen=True)
class NormalizationStats:
    names: tuple
    median: np.ndarray
    mean: np.ndarray
    std: np.ndarray = field(repr=False)


def describe_columns(header, schema: FeatureSchema) -> str:
    """Schema-validation report: which file column feeds each schema feature."""
    positions = {name: i for i, name in enumerate(header)}
    lines = [f"columns in file: {len(header)}"]
    for name in (ID_COLUMN,) + tuple(schema.names) + (WEIGHT_COLUMN, LABEL_COLUMN):
        where = positions.get(name)
        lines.append(f"{name} -> {'MISSING' if where is None else f'column {where}'}")
    extra = [name for name in header if name not in set(schema.names) | {ID_COLUMN, WEIGHT_COLUMN, LABEL_COLUMN}]
    if extra:
        lines.append(f"ignored columns: {', '.join(extra)}")
    return "\n".join(lines)


def _is_number(text: str) -> bool:
    try:
        return bool(np.isfinite(np.float64(text)))
    except ValueError:
        return False


def _numeric_column(frame: pd.DataFrame, column: str) -> np.ndarray:
    raw = frame[column]
    try:
        # numpy's str -> float conversion is correctly rounded, so cells round-trip bit-exactly
        values = raw.to_numpy(dtype=str).astype(np.float64)
        bad = ~np.isfinite(values)
    except ValueError:
        bad = np.array([not _is_number(cell) for cell in raw])
        values = None
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        # header is line 1, first data row is line 2
        raise ParseError(
            f"Row {row + 2}: column '{column}' has non-numeric value '{raw.iloc[row]}'.", source=__name__
        )
    return values


def parse_events(
    stream: Union[str, TextIO], schema: FeatureSchema = None, require_labels: bool = True
) -> Dataset:
    """
    Reads a challenge-format CSV (header row, columns matched by name).

    Args:
        stream: A path or an open text stream.
        schema (FeatureSchema): Defaults to the 30-feature challenge schema.
        require_labels (bool): When False, Weight/Label may be absent (unlabeled test files).
    Returns:
        Dataset: One event per data row, in file order.
    """
    schema = schema or default_schema()
    try:
        frame = pd.read_csv(stream, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise SchemaError("The CSV input is empty (no header row).", source=__name__) from None
    except pd.errors.ParserError as e:
        raise ParseError(f"Malformed CSV: {e}", source=__name__) from None
    except UnicodeDecodeError as e:
        raise ParseError(f"The CSV input is not UTF-8 text: {e}", source=__name__) from None
    except OSError as e:
        raise DataError(f"Cannot read the CSV input: {e}", source=__name__) from e

    header = [str(column).strip() for column in frame.columns]
    frame.columns = header
    logger.info("Schema validation report:\n%s", describe_columns(header, schema))

    required = [ID_COLUMN] + list(schema.names)
    has_labels = LABEL_COLUMN in header and WEIGHT_COLUMN in header
    if require_labels or has_labels:
        required += [WEIGHT_COLUMN, LABEL_COLUMN]
    for column in required:
        if column not in header:
            raise SchemaError(f"Missing required column '{column}'.", source=__name__)

    ids = _numeric_column(frame, ID_COLUMN).astype(np.int64)
    features = np.column_stack([_numeric_column(frame, name) for name in schema.names]) if len(frame) else np.empty((0, len(schema)))
    missing = features == MISSING_SENTINEL

    if require_labels or has_labels:
        weights = _numeric_column(frame, WEIGHT_COLUMN)
        bad_weight = np.flatnonzero(~(weights > 0))
        if bad_weight.size:
            raise ParseError(f"Row {bad_weight[0] + 2}: Weight must be positive.", source=__name__)
        raw_labels = frame[LABEL_COLUMN].str.strip()
        bad_label = np.flatnonzero(~raw_labels.isin(["s", "b"]).to_numpy())
        if bad_label.size:
            row = int(bad_label[0])
            raise ParseError(
                f"Row {row + 2}: Label must be 's' or 'b', got '{raw_labels.iloc[row]}'.", source=__name__
            )
        labels = (raw_labels == "s").to_numpy()
    else:
        weights = np.ones(len(frame))
        labels = None

    return Dataset(ids=ids, features=features, labels=labels, weights=weights, missing=missing, schema=schema)


def write_events(dataset: Dataset, stream: Union[str, TextIO]) -> None:
    """Writes the dataset back in challenge CSV form with round-trip float formatting."""
    frame = pd.DataFrame(dataset.features, columns=list(dataset.schema.names))
    frame.insert(0, ID_COLUMN, dataset.ids)
    if dataset.is_labeled:
        frame[WEIGHT_COLUMN] = dataset.weights
        frame[LABEL_COLUMN] = np.where(dataset.labels, "s", "b")
    frame.to_csv(stream, index=False, lineterminator="\n")


def _require_labels(dataset: Dataset):
    if not dataset.is_labeled:
        raise DataError("This operation needs a labeled dataset.", source=__name__)


def normalize_weights(dataset: Dataset, n_s_expected: float, n_b_expected: float) -> Dataset:
    """Uniform class weights: n_s/|S| on every signal event, n_b/|B| on every background event."""
    _require_labels(dataset)
    if n_s_expected <= 0 or n_b_expected <= 0:
        raise DataError("Expected signal and background counts must be positive.", source=__name__)
    n_signal = int(dataset.labels.sum())
    n_background = len(dataset) - n_signal
    if n_signal == 0 or n_background == 0:
        empty = "signal" if n_signal == 0 else "background"
        raise DataError(f"Cannot normalize weights: the {empty} class is empty.", source=__name__)
    weights = np.where(dataset.labels, n_s_expected / n_signal, n_b_expected / n_background)
    return replace(dataset, weights=weights, n_s_expected=float(n_s_expected), n_b_expected=float(n_b_expected))


def fit_normalization(train: Dataset) -> NormalizationStats:
    """Per-feature median over non-missing cells, then mean/std after median imputation."""
    if len(train) == 0:
        raise DataError("Cannot fit normalization on an empty dataset.", source=__name__)
    values = np.where(train.missing, np.nan, train.features)
    observed = (~train.missing).sum(axis=0)
    empty = np.flatnonzero(observed == 0)
    if empty.size:
        raise DataError(
            f"Feature '{train.schema.names[empty[0]]}' has no non-missing values.", source=__name__
        )
    median = np.nanmedian(values, axis=0)
    imputed = np.where(train.missing, median, train.features)
    mean = imputed.mean(axis=0)
    std = imputed.std(axis=0)
    # constant features keep std 1 so they normalize to zeros
    std = np.where(std > 0, std, 1.0)
    return NormalizationStats(names=tuple(train.schema.names), median=median, mean=mean, std=std)


def normalize_matrix(stats: NormalizationStats, raw: np.ndarray) -> np.ndarray:
    """Imputes exact -999.0 cells with the median, then z-scores every column."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != len(stats.names):
        raise DataError(
            f"Expected {len(stats.names)} features, got {raw.shape[-1]}.", source=__name__
        )
    imputed = np.where(raw == MISSING_SENTINEL, stats.median, raw)
    return (imputed - stats.mean) / stats.std


def apply_normalization(dataset: Dataset, stats: NormalizationStats) -> Dataset:
    """One-shot transform; applying it twice is not meaningful."""
    if tuple(dataset.schema.names) != tuple(stats.names):
        raise SchemaError("Normalization statistics were fitted on a different schema.", source=__name__)
    imputed = np.where(dataset.missing, stats.median, dataset.features)
    return replace(dataset, features=(imputed - stats.mean) / stats.std)


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple:
    """Seeded shuffle split into (train, rest); both keep the original event order."""
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction must lie in (0, 1), got {train_fraction}.", source=__name__)
    if len(dataset) == 0:
        raise DataError("Cannot split an empty dataset.", source=__name__)
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_train = int(round(len(dataset) * train_fraction))
    return dataset.subset(np.sort(order[:n_train])), dataset.subset(np.sort(order[n_train:]))


def training_weights(dataset: Dataset, use_weights: bool = True) -> np.ndarray:
    """
    Per-example loss weights with unit mean (ones when weighting is off).

    Labeled data is class-balanced: each class carries half the total weight,
    its events keeping their relative weights.
    """
    if not use_weights:
        return np.ones(len(dataset))
    weights = np.asarray(dataset.weights, dtype=np.float64)
    n = len(weights)
    if dataset.labels is None or dataset.labels.all() or not dataset.labels.any():
        return weights / weights.mean()
    signal = dataset.labels
    return np.where(
        signal,
        weights * (0.5 * n / weights[signal].sum()),
        weights * (0.5 * n / weights[~signal].sum()),
    )
