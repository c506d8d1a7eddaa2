"""Deterministic synthetic panels: two classes, one of them drifting.

Normal subjects are pure per-feature Gaussian noise around zero. Diseased
subjects add a linear mean drift per visit on a fixed sparse block of
informative features, giving the monotone degradation the index learners
assume. Labels are observed for a configurable fraction of each class and
hidden otherwise; the full truth is returned separately for scoring.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .panel import (
    NEGATIVE,
    POSITIVE,
    LongitudinalPanel,
    SubjectSeries,
    write_panel,
)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class SimConfig:
    """Generation knobs.

    ``normal_proportion=None`` keeps both classes at ``n_per_class``; setting
    it explicitly re-splits the same total with floor rounding, because equal
    class sizes and a 60/40 proportion cannot both hold at once.
    ``noise_sigmas=None`` draws per-feature sigmas from Uniform(0.5, 1.5)
    under the seed. Class means sit at zero; ``degradation_rate`` is the only
    mean signal.
    """

    d: int = 90
    n_per_class: int = 50
    normal_proportion: float | None = None
    visits_min: int = 3
    visits_max: int = 7
    degradation_rate: float = 0.2
    noise_sigmas: tuple[float, ...] | None = None
    informative_k: int = 20
    label_observed_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")
        if self.normal_proportion is not None and not 0.0 < self.normal_proportion < 1.0:
            raise ValueError("normal_proportion must lie in (0, 1)")
        if self.visits_min < 1 or self.visits_max < self.visits_min:
            raise ValueError("need 1 <= visits_min <= visits_max")
        if self.degradation_rate < 0:
            raise ValueError("degradation_rate must be >= 0")
        if not 0 <= self.informative_k <= self.d:
            raise ValueError("informative_k must lie in [0, d]")
        if not 0.0 <= self.label_observed_fraction <= 1.0:
            raise ValueError("label_observed_fraction must lie in [0, 1]")
        if self.noise_sigmas is not None:
            sigmas = tuple(float(s) for s in self.noise_sigmas)
            if len(sigmas) != self.d:
                raise ValueError("noise_sigmas must have length d")
            if any(s < 0 for s in sigmas):
                raise ValueError("noise_sigmas must be non-negative")
            object.__setattr__(self, "noise_sigmas", sigmas)

    def class_sizes(self) -> tuple[int, int]:
        """(n_normal, n_diseased) after resolving the proportion rule."""
        if self.normal_proportion is None:
            return self.n_per_class, self.n_per_class
        total = 2 * self.n_per_class
        n_normal = int(np.floor(self.normal_proportion * total))
        n_diseased = total - n_normal
        if n_normal < 1 or n_diseased < 1:
            raise ValueError("normal_proportion leaves an empty class")
        return n_normal, n_diseased

    def informative_indices(self) -> tuple[int, ...]:
        return tuple(range(self.informative_k))

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "n_per_class": self.n_per_class,
            "normal_proportion": self.normal_proportion,
            "visits_min": self.visits_min,
            "visits_max": self.visits_max,
            "degradation_rate": self.degradation_rate,
            "noise_sigmas": None if self.noise_sigmas is None else list(self.noise_sigmas),
            "informative_k": self.informative_k,
            "label_observed_fraction": self.label_observed_fraction,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SimConfig":
        payload = dict(payload)
        if payload.get("noise_sigmas") is not None:
            payload["noise_sigmas"] = tuple(payload["noise_sigmas"])
        return cls(**payload)


def _generate(config: SimConfig):
    rng = np.random.default_rng(config.seed)
    if config.noise_sigmas is None:
        sigmas = rng.uniform(0.5, 1.5, config.d)
    else:
        sigmas = np.asarray(config.noise_sigmas, dtype=float)

    n_normal, n_diseased = config.class_sizes()
    total = n_normal + n_diseased
    width = max(3, len(str(total)))
    k = config.informative_k
    delta = config.degradation_rate

    subjects = []
    truth: dict[str, int] = {}
    counter = 0
    for class_label, count in ((NEGATIVE, n_normal), (POSITIVE, n_diseased)):
        for _ in range(count):
            counter += 1
            sid = f"s{counter:0{width}d}"
            n_visits = int(rng.integers(config.visits_min, config.visits_max + 1))
            x = rng.standard_normal((n_visits, config.d)) * sigmas
            if class_label == POSITIVE and k > 0:
                x[:, :k] += delta * np.arange(n_visits)[:, None]
            subjects.append(
                SubjectSeries(sid, np.arange(1, n_visits + 1), x, label=class_label)
            )
            truth[sid] = class_label

    # hide labels outside a floor(fraction * class size) observed subset per class
    observed: set[str] = set()
    offset = 0
    for count in (n_normal, n_diseased):
        n_observed = int(np.floor(config.label_observed_fraction * count))
        chosen = rng.choice(count, size=n_observed, replace=False)
        observed.update(subjects[offset + i].subject_id for i in chosen)
        offset += count
    subjects = tuple(
        s if s.subject_id in observed else SubjectSeries(s.subject_id, s.times, s.observations, None)
        for s in subjects
    )
    return LongitudinalPanel(subjects), truth, sigmas


def simulate(config: SimConfig) -> tuple[LongitudinalPanel, dict[str, int]]:
    """Generate a panel plus the full ground-truth label map."""
    panel, truth, _ = _generate(config)
    return panel, truth


def simulate_to_files(config: SimConfig, csv_path, echo_path=None):
    """Generate once, write the panel CSV and optionally the config echo.

    The echo records every resolved quantity (sigmas, informative feature
    indices, true labels) so oracle tests can reconstruct the ground truth;
    training code never reads it.
    """
    panel, truth, sigmas = _generate(config)
    write_panel(panel, csv_path)
    if echo_path is not None:
        echo = {
            "format_version": FORMAT_VERSION,
            "config": config.to_dict(),
            "class_sizes": list(config.class_sizes()),
            "resolved_noise_sigmas": [float(s) for s in sigmas],
            "informative_indices": list(config.informative_indices()),
            "true_labels": {sid: int(lbl) for sid, lbl in sorted(truth.items())},
        }
        Path(echo_path).write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    return panel, truth
