"""
Per-feature relative-frequency histograms of learned features, signal and
background side by side, written as plot-ready TSV files.
"""
import logging
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd

from errors import ConfigError, DataError

logger = logging.getLogger(__name__)

DEFAULT_BINS = 50


@dataclass(frozen=True)
class HistogramExport:
    """Fixed-bin weighted relative frequencies of one feature; each class sums to 1."""

    feature: int
    edges: np.ndarray
    signal: np.ndarray
    background: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "bin_low": self.edges[:-1],
            "bin_high": self.edges[1:],
            "signal": self.signal,
            "background": self.background,
        })


def _relative(values, edges, weights) -> np.ndarray:
    counts, _ = np.histogram(values, bins=edges, weights=weights)
    return counts / counts.sum()


def feature_histogram(column, labels, weights, feature: int = 0, bins: int = DEFAULT_BINS) -> HistogramExport:
    """Bins span the observed range of the column over both classes."""
    column = np.asarray(column, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if labels is None:
        raise DataError("Histograms need labeled events.", source=__name__)
    labels = np.asarray(labels, dtype=bool)
    if labels.all() or not labels.any():
        raise DataError("Histograms need both signal and background events.", source=__name__)
    edges = np.histogram_bin_edges(column, bins=bins)
    return HistogramExport(
        feature=feature,
        edges=edges,
        signal=_relative(column[labels], edges, weights[labels]),
        background=_relative(column[~labels], edges, weights[~labels]),
    )


def select_features(n_features: int, fraction: float = 1.0, seed: int = 0) -> np.ndarray:
    """All features, or a seeded random `fraction` of them in ascending order."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"Sample fraction must lie in (0, 1], got {fraction}.", source=__name__)
    if fraction == 1.0:
        return np.arange(n_features)
    count = max(1, int(round(fraction * n_features)))
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n_features, size=count, replace=False))


def feature_histograms(features, labels, weights, bins: int = DEFAULT_BINS, fraction: float = 1.0, seed: int = 0) -> list:
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    return [
        feature_histogram(features[:, j], labels, weights, feature=int(j), bins=bins)
        for j in select_features(features.shape[1], fraction, seed)
    ]


def write_histograms(exports: list, out_dir: str) -> list:
    """One `feature_<j>.tsv` per export; returns the written paths."""
    paths = []
    try:
        os.makedirs(out_dir, exist_ok=True)
        for export in exports:
            path = os.path.join(out_dir, f"feature_{export.feature:03d}.tsv")
            export.to_frame().to_csv(path, sep="\t", index=False, lineterminator="\n")
            paths.append(path)
    except OSError as e:
        raise DataError(f"Cannot write histograms to '{out_dir}': {e}", source=__name__) from e
    logger.info("Wrote %d histogram files to %s", len(paths), out_dir)
    return paths
