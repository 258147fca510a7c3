"""
Weighted evaluation: AMS, ROC/AUC, selected-signal estimate and expected
discovery significance at the 100 signal / 1,000 background convention.
"""
import json
import math
import os
from dataclasses import dataclass, asdict

import numpy as np
import pandas as pd

from errors import DataError

# --- Constants ---
DEFAULT_B_REGULAR = 10.0
SIGNIFICANCE_S_EXPECTED = 100.0
SIGNIFICANCE_B_EXPECTED = 1000.0
# floor on the background count so ln(1 + s/b) stays finite where FPR = 0
BACKGROUND_FLOOR = 1e-6
# below this s/b ratio the closed form loses digits to cancellation; use its series instead
SERIES_CUTOFF = 1e-3
REPORT_VERSION = 1


def _ams_core(s, b):
    """(s + b) ln(1 + s/b) - s, evaluated stably for small s/b."""
    ratio = s / b
    direct = (s + b) * np.log1p(ratio) - s
    # sum_{k>=2} (-1)^k x^k / (k (k - 1)), times b
    small = np.minimum(ratio, SERIES_CUTOFF)
    series = np.zeros_like(ratio)
    term_power = small * small
    for k in range(2, 14):
        series = series + (-1) ** k * term_power / (k * (k - 1))
        term_power = term_power * small
    return np.where(ratio < SERIES_CUTOFF, b * series, direct)


def ams(s: float, b: float, b_regular: float = DEFAULT_B_REGULAR) -> float:
    """sqrt(2((s + b + b_reg) ln(1 + s/(b + b_reg)) - s)); 0 when s = 0."""
    if s < 0 or b < 0 or b_regular < 0:
        raise DataError("AMS needs nonnegative s, b and b_regular.", source=__name__)
    background = b + b_regular
    if background <= 0:
        raise DataError("AMS needs b + b_regular > 0.", source=__name__)
    if s == 0:
        return 0.0
    inner = float(_ams_core(np.float64(s), np.float64(background)))
    return math.sqrt(2.0 * max(inner, 0.0))


def ams_curve(s: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorized AMS with the regularization already folded into `b`."""
    s = np.asarray(s, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    inner = _ams_core(s, b)
    return np.sqrt(2.0 * np.maximum(inner, 0.0))


def selected_signal_estimate(labels, predictions, weights) -> float:
    """n_hat_s: sum of weights over events that are true signal and predicted signal."""
    labels = np.asarray(labels, dtype=bool)
    predictions = np.asarray(predictions, dtype=bool)
    return float(np.sum(np.asarray(weights)[labels & predictions]))


@dataclass(frozen=True)
class ROCCurve:
    """Points ordered by decreasing threshold; the first is (inf, 0, 0), the last (min score, 1, 1)."""

    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray

    def __len__(self) -> int:
        return len(self.thresholds)


def _check_classes(labels):
    if labels.all() or not labels.any():
        raise DataError("ROC analysis needs both signal and background events.", source=__name__)


def roc_curve(scores, labels, weights) -> ROCCurve:
    """Weighted ROC; tied scores form a single threshold step."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    weights = np.asarray(weights, dtype=np.float64)
    _check_classes(labels)
    order = np.argsort(-scores, kind="mergesort")
    scores, labels, weights = scores[order], labels[order], weights[order]
    signal_cum = np.cumsum(np.where(labels, weights, 0.0))
    background_cum = np.cumsum(np.where(labels, 0.0, weights))
    # last position of every run of equal scores
    ends = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
    tpr = signal_cum[ends] / signal_cum[-1]
    fpr = background_cum[ends] / background_cum[-1]
    tpr[-1] = fpr[-1] = 1.0
    return ROCCurve(
        thresholds=np.r_[np.inf, scores[ends]],
        tpr=np.r_[0.0, tpr],
        fpr=np.r_[0.0, fpr],
    )


def auc(curve: ROCCurve) -> float:
    """Trapezoid area under the ROC curve."""
    widths = np.diff(curve.fpr)
    heights = 0.5 * (curve.tpr[1:] + curve.tpr[:-1])
    return float(np.sum(widths * heights))


def discovery_significance(scores, labels, weights, s_exp: float = SIGNIFICANCE_S_EXPECTED, b_exp: float = SIGNIFICANCE_B_EXPECTED) -> tuple:
    """
    Best Z over ROC thresholds with s = s_exp * TPR and b = max(b_exp * FPR, 1e-6).

    Returns:
        (Z, threshold) at the maximizing threshold.
    """
    curve = roc_curve(scores, labels, weights)
    s = s_exp * curve.tpr
    b = np.maximum(b_exp * curve.fpr, BACKGROUND_FLOOR)
    z = ams_curve(s, b)
    best = int(np.argmax(z))
    return float(z[best]), float(curve.thresholds[best])


def best_ams(scores, labels, weights, b_regular: float = DEFAULT_B_REGULAR) -> tuple:
    """AMS maximized over thresholds using the events' own class-normalized weights."""
    curve = roc_curve(scores, labels, weights)
    labels = np.asarray(labels, dtype=bool)
    weights = np.asarray(weights, dtype=np.float64)
    s = weights[labels].sum() * curve.tpr
    b = np.maximum(weights[~labels].sum() * curve.fpr + b_regular, BACKGROUND_FLOOR)
    values = ams_curve(s, b)
    best = int(np.argmax(values))
    return float(curve.thresholds[best]), float(values[best])


@dataclass(frozen=True)
class MetricsReport:
    auc: float
    ams_threshold: float
    ams: float
    discovery_significance_z: float
    z_threshold: float
    n_hat_s: float
    b_regular: float = DEFAULT_B_REGULAR
    background_floor: float = BACKGROUND_FLOOR

    def to_lines(self) -> list:
        return [f"{key}={value!r}" for key, value in asdict(self).items()]


def evaluate_scores(scores, labels, weights, b_regular: float = DEFAULT_B_REGULAR) -> tuple:
    """Every metric of one scored, labeled, weighted sample. Returns (MetricsReport, ROCCurve)."""
    scores = np.asarray(scores, dtype=np.float64)
    curve = roc_curve(scores, labels, weights)
    ams_threshold, ams_value = best_ams(scores, labels, weights, b_regular)
    z, z_threshold = discovery_significance(scores, labels, weights)
    n_hat_s = selected_signal_estimate(labels, scores >= ams_threshold, weights)
    report = MetricsReport(
        auc=auc(curve),
        ams_threshold=ams_threshold,
        ams=ams_value,
        discovery_significance_z=z,
        z_threshold=z_threshold,
        n_hat_s=n_hat_s,
        b_regular=b_regular,
    )
    return report, curve


# --- Exports ---

def write_roc_tsv(curve: ROCCurve, path: str) -> None:
    frame = pd.DataFrame({"threshold": curve.thresholds, "tpr": curve.tpr, "fpr": curve.fpr})
    try:
        frame.to_csv(path, sep="\t", index=False, lineterminator="\n")
    except OSError as e:
        raise DataError(f"Cannot write ROC file '{path}': {e}", source=__name__) from e


def read_roc_tsv(path: str) -> ROCCurve:
    frame = pd.read_csv(path, sep="\t", float_precision="round_trip")
    for column in ("threshold", "tpr", "fpr"):
        if column not in frame.columns:
            raise DataError(f"ROC file '{path}' has no '{column}' column.", source=__name__)
    return ROCCurve(
        thresholds=frame["threshold"].to_numpy(dtype=np.float64),
        tpr=frame["tpr"].to_numpy(dtype=np.float64),
        fpr=frame["fpr"].to_numpy(dtype=np.float64),
    )


def write_report(report: MetricsReport, path: str, extra: dict = None) -> str:
    """Writes `key=value` text to `path` and the same content as versioned JSON next to it."""
    extra = extra or {}
    lines = report.to_lines() + [f"{key}={value!r}" for key, value in extra.items()]
    json_path = os.path.splitext(path)[0] + ".json"
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump({"format_version": REPORT_VERSION, **asdict(report), **extra}, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise DataError(f"Cannot write report '{path}': {e}", source=__name__) from e
    return json_path
