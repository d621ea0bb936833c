"""Accuracy, disparity and scoring metrics for continuous and binary predictions."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd

PROB_FLOOR = 1e-12
DEFAULT_DECISION_THRESHOLD = 0.5
DEFAULT_BINS = 10


class MetricsError(ValueError):
    """Raised for malformed metric inputs."""


class LengthMismatch(MetricsError):
    def __init__(self, *lengths: int) -> None:
        super().__init__(f"inputs must have equal length, got {', '.join(map(str, lengths))}")
        self.lengths = lengths


class ZeroVariance(MetricsError):
    def __init__(self, argument: str) -> None:
        super().__init__(f"{argument} has zero variance; correlation is undefined")
        self.argument = argument


def _vectors(*arrays: np.ndarray) -> Tuple[np.ndarray, ...]:
    vectors = tuple(np.asarray(a, dtype=float).reshape(-1) for a in arrays)
    lengths = {v.size for v in vectors}
    if len(lengths) != 1:
        raise LengthMismatch(*(v.size for v in vectors))
    if lengths.pop() < 1:
        raise MetricsError("inputs must be non-empty")
    return vectors


def _binary(y: np.ndarray) -> None:
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise MetricsError("labels must be binary")


def rmse(truth: np.ndarray, pred: np.ndarray) -> float:
    truth, pred = _vectors(truth, pred)
    return float(np.sqrt(np.mean((truth - pred) ** 2)))


def error_covariate_correlation(truth: np.ndarray, pred: np.ndarray, x: np.ndarray) -> float:
    """Pearson correlation between the prediction error ``truth - pred`` and ``x``."""

    truth, pred, x = _vectors(truth, pred, x)
    error = truth - pred
    error = error - error.mean()
    x = x - x.mean()
    spread_error = float(np.sqrt(np.sum(error**2)))
    spread_x = float(np.sqrt(np.sum(x**2)))
    # relative cutoffs: an error vector at rounding level counts as constant
    if spread_error <= 1e-12 * max(1.0, float(np.sqrt(np.sum(truth**2)))):
        raise ZeroVariance("prediction error")
    if spread_x == 0.0:
        raise ZeroVariance("covariate")
    return float(np.sum(error * x) / (spread_error * spread_x))


def _realized(y: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Probability assigned to the class that occurred."""

    return np.where(y == 1.0, q, 1.0 - q)


def log_score(y: np.ndarray, q: np.ndarray) -> float:
    """Mean ``log Q(y)``; higher is better."""

    y, q = _vectors(y, q)
    _binary(y)
    realized = np.clip(_realized(y, np.clip(q, 0.0, 1.0)), PROB_FLOOR, 1.0)
    return float(np.mean(np.log(realized)))


def brier_score(y: np.ndarray, q: np.ndarray) -> float:
    """Mean ``2 Q(y) - sum_j Q(j)**2 - 1``; higher is better, 0 is perfect."""

    y, q = _vectors(y, q)
    _binary(y)
    q = np.clip(q, 0.0, 1.0)
    return float(np.mean(2.0 * _realized(y, q) - (q**2 + (1.0 - q) ** 2) - 1.0))


def mean_squared_error(y: np.ndarray, q: np.ndarray) -> float:
    y, q = _vectors(y, q)
    return float(np.mean((q - y) ** 2))


@dataclass(frozen=True)
class ConfusionRates:
    accuracy: float
    ppv: Optional[float]
    npv: Optional[float]


def confusion_metrics(
    y: np.ndarray, q: np.ndarray, threshold: float = DEFAULT_DECISION_THRESHOLD
) -> ConfusionRates:
    """Classify ``q >= threshold``; rates with an empty denominator are ``None``."""

    if not 0.0 < threshold < 1.0:
        raise MetricsError(f"decision threshold must lie in (0, 1), got {threshold}")
    y, q = _vectors(y, q)
    _binary(y)
    predicted = q >= threshold
    actual = y == 1.0
    positives = int(np.count_nonzero(predicted))
    negatives = predicted.size - positives
    true_pos = int(np.count_nonzero(predicted & actual))
    true_neg = int(np.count_nonzero(~predicted & ~actual))
    return ConfusionRates(
        accuracy=(true_pos + true_neg) / predicted.size,
        ppv=true_pos / positives if positives else None,
        npv=true_neg / negatives if negatives else None,
    )


@dataclass(frozen=True)
class CalibrationBin:
    mean_predicted: float
    observed_rate: float
    count: int


@dataclass(frozen=True)
class CalibrationCurve:
    bins: Tuple[CalibrationBin, ...]
    binning: str = "quantile"

    @property
    def n(self) -> int:
        return sum(b.count for b in self.bins)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(b) for b in self.bins])

    def mse(self) -> float:
        """Count-weighted squared gap between bin mean prediction and bin observed rate."""

        gaps = np.array([(b.mean_predicted - b.observed_rate) ** 2 for b in self.bins])
        counts = np.array([b.count for b in self.bins], dtype=float)
        return float(np.sum(gaps * counts) / counts.sum())


def calibration_curve(y: np.ndarray, q: np.ndarray, n_bins: int = DEFAULT_BINS) -> CalibrationCurve:
    """Equal-count bins over ``q``; tied quantile edges collapse into one bin."""

    if n_bins < 2:
        raise MetricsError("n_bins must be at least 2")
    y, q = _vectors(y, q)
    _binary(y)
    edges = np.unique(np.quantile(q, np.linspace(0.0, 1.0, n_bins + 1)))
    if edges.size < 2:
        index = np.zeros(q.size, dtype=int)
    else:
        # interior edges only: the lowest bin is closed below, the highest closed above
        index = np.searchsorted(edges[1:-1], q, side="right")

    bins: List[CalibrationBin] = []
    for b in range(int(index.max()) + 1):
        mask = index == b
        count = int(np.count_nonzero(mask))
        if count == 0:
            continue
        bins.append(
            CalibrationBin(
                mean_predicted=float(q[mask].mean()),
                observed_rate=float(y[mask].mean()),
                count=count,
            )
        )
    return CalibrationCurve(bins=tuple(bins))


@dataclass(frozen=True)
class MetricsReport:
    """One model's column of the comparison table."""

    log_score: float
    brier_score: float
    mse: float
    accuracy: float
    ppv: Optional[float]
    npv: Optional[float]
    decision_threshold: float
    n: int
    calibration_mse: float

    def to_dict(self) -> Dict[str, Optional[float]]:
        return asdict(self)


def evaluate_binary(
    y: np.ndarray,
    q: np.ndarray,
    threshold: float = DEFAULT_DECISION_THRESHOLD,
    n_bins: int = DEFAULT_BINS,
) -> MetricsReport:
    y, q = _vectors(y, q)
    rates = confusion_metrics(y, q, threshold)
    return MetricsReport(
        log_score=log_score(y, q),
        brier_score=brier_score(y, q),
        mse=mean_squared_error(y, q),
        accuracy=rates.accuracy,
        ppv=rates.ppv,
        npv=rates.npv,
        decision_threshold=threshold,
        n=int(y.size),
        calibration_mse=calibration_curve(y, q, n_bins).mse(),
    )


TABLE_ROWS = ("log_score", "brier_score", "mse", "calibration_mse", "accuracy", "ppv", "npv", "n")


def metrics_table(reports: Mapping[str, MetricsReport]) -> pd.DataFrame:
    """Rows are metrics, columns are models, in insertion order."""

    data = {
        model: [report.to_dict()[row] for row in TABLE_ROWS] for model, report in reports.items()
    }
    frame = pd.DataFrame(data, index=list(TABLE_ROWS))
    frame.index.name = "metric"
    return frame
