"""Closed-form prediction from the Gaussian weight posterior.

Under a posterior N(v, I) the index of a visit x is Gaussian with mean v.x
and standard deviation ||x||, so the class probability has the closed form
Phi(|v.x| / ||x||). Confidence feeds two abstention modes: a probability
threshold and a fixed rejection rate over the least-confident records.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionMismatch, ZeroFeatureVector
from .med_core import WeightPosterior
from .panel import LongitudinalPanel, SubjectSeries

REJECTED_LABEL = 0

PREDICTION_COLUMNS = (
    "subject_id",
    "t_last",
    "index_mean",
    "index_std",
    "pred",
    "confidence",
    "abstained",
)


def _normal_cdf(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def _check_dim(posterior: WeightPosterior, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (posterior.d,):
        raise DimensionMismatch(f"x has shape {x.shape}, expected ({posterior.d},)")
    return x


def predict(posterior: WeightPosterior, x: Sequence[float]) -> int:
    """Sign of the posterior-mean index; an exact tie goes to +1."""
    x = _check_dim(posterior, x)
    return 1 if float(posterior.mean @ x) >= 0.0 else -1


def confidence(posterior: WeightPosterior, x: Sequence[float]) -> float:
    """Phi(|v.x| / ||x||): the larger of the two class probabilities."""
    x = _check_dim(posterior, x)
    norm = float(np.linalg.norm(x))
    if norm == 0.0:
        raise ZeroFeatureVector("confidence undefined for an all-zero feature vector")
    return _normal_cdf(abs(float(posterior.mean @ x)) / norm)


@dataclass(frozen=True)
class IndexTrajectory:
    """Per-visit posterior index means and standard deviations."""

    times: tuple[int, ...]
    means: tuple[float, ...]
    stds: tuple[float, ...]
    monotonicity_violations: int


def index_trajectory(posterior: WeightPosterior, series: SubjectSeries) -> IndexTrajectory:
    """Index mean v.x_t and std ||x_t|| per visit, with a count of visits
    where the mean index decreases."""
    if series.d != posterior.d:
        raise DimensionMismatch(
            f"series has d={series.d}, posterior has d={posterior.d}"
        )
    means = series.observations @ posterior.mean
    stds = np.linalg.norm(series.observations, axis=1)
    violations = int(np.sum(np.diff(means) < 0.0))
    return IndexTrajectory(
        times=tuple(int(t) for t in series.times),
        means=tuple(float(m) for m in means),
        stds=tuple(float(s) for s in stds),
        monotonicity_violations=violations,
    )


@dataclass(frozen=True)
class PredictionRecord:
    """Decision at the terminal visit plus the full index trajectory."""

    subject_id: str
    trajectory: IndexTrajectory
    predicted_label: int
    confidence: float
    abstained: bool = False

    @property
    def t_last(self) -> int:
        return self.trajectory.times[-1]

    @property
    def index_mean(self) -> float:
        return self.trajectory.means[-1]

    @property
    def index_std(self) -> float:
        return self.trajectory.stds[-1]

    @property
    def rejection_label(self) -> int:
        """Rejection-aware label: 0 when abstained, else the prediction."""
        return REJECTED_LABEL if self.abstained else self.predicted_label


def predict_subject(posterior: WeightPosterior, series: SubjectSeries) -> PredictionRecord:
    traj = index_trajectory(posterior, series)
    return PredictionRecord(
        subject_id=series.subject_id,
        trajectory=traj,
        predicted_label=predict(posterior, series.terminal),
        confidence=confidence(posterior, series.terminal),
    )


def predict_panel(posterior: WeightPosterior, panel: LongitudinalPanel) -> list[PredictionRecord]:
    return [predict_subject(posterior, s) for s in panel.subjects]


def reject_by_threshold(
    records: Sequence[PredictionRecord], threshold: float
) -> list[PredictionRecord]:
    """Abstain exactly on records with confidence below the threshold."""
    if not 0.5 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0.5, 1], got {threshold}")
    return [replace(r, abstained=r.confidence < threshold) for r in records]


def reject_by_rate(
    records: Sequence[PredictionRecord], rate: float
) -> list[PredictionRecord]:
    """Abstain on the floor(rate * len) least-confident records.

    Ties break by input position (stable sort), so growing the rate always
    grows the abstention set.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"rate must lie in [0, 1), got {rate}")
    if not records:
        raise ValueError("need at least one record")
    n_reject = int(math.floor(rate * len(records)))
    order = np.argsort([r.confidence for r in records], kind="stable")
    rejected = set(order[:n_reject].tolist())
    return [replace(r, abstained=i in rejected) for i, r in enumerate(records)]


# ---------------------------------------------------------------------------
# prediction CSV


def write_predictions(records: Iterable[PredictionRecord], path) -> None:
    """One row per subject; the pred column is rejection-aware (1, -1 or 0)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTION_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.subject_id,
                    r.t_last,
                    repr(r.index_mean),
                    repr(r.index_std),
                    r.rejection_label,
                    repr(r.confidence),
                    int(r.abstained),
                ]
            )


def read_prediction_labels(path) -> dict[str, int]:
    """Rejection-aware labels keyed by subject id, as written above."""
    out: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out[row["subject_id"]] = int(row["pred"])
    return out
