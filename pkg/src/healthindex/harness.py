"""Experiment driver: split, train, predict, reject, score, aggregate.

One run of the pipeline walks a grid of training ratios, unlabeled
fractions, margin-rate cells and seeds; each cell trains on a masked
subject-level split, predicts the held-out subjects at their terminal
visits and scores accuracy over the non-abstained ones. Results aggregate
into a deterministic table backed by a per-run log that can reproduce
every cell.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import med_core, predictor
from .chi_baseline import ChiHyperparams, chi_predict_panel, chi_train
from .med_core import DualProblem, DualSolution, WeightPosterior, solve_dual
from .panel import (
    LabelPrior,
    LongitudinalPanel,
    aggregate_matrix,
    aggregates,
    apply_standardization,
    fit_standardization,
    load_panel,
    split_and_mask,
)
from .predictor import PredictionRecord, predict_panel, reject_by_rate
from .simulator import SimConfig, simulate

METHOD_UQCHI = "uqchi"
METHOD_CHI = "chi"

_SPLIT_SEED_OFFSET = 500_000
_CV_SEED_OFFSET = 900_000


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalResult:
    """Accuracy over accepted predictions; None when everything abstained."""

    accuracy: float | None
    n_accepted: int
    n_abstained: int
    true_positive: int
    true_negative: int
    false_positive: int
    false_negative: int

    @property
    def n_scored(self) -> int:
        return self.n_accepted + self.n_abstained


def evaluate(predictions: Mapping[str, int], truth: Mapping[str, int]) -> EvalResult:
    """Score rejection-aware predictions (1, -1, 0) against true labels.

    Abstentions (label 0) leave the accuracy denominator. Every predicted id
    must carry a truth entry.
    """
    missing = [sid for sid in predictions if sid not in truth]
    if missing:
        raise ValueError(f"no truth for predicted subjects: {missing[:5]}")
    tp = tn = fp = fn = abstained = 0
    for sid, pred in predictions.items():
        if pred == predictor.REJECTED_LABEL:
            abstained += 1
            continue
        if pred not in (1, -1):
            raise ValueError(f"prediction for {sid} must be 1, -1 or 0, got {pred}")
        actual = truth[sid]
        if pred == 1:
            tp += int(actual == 1)
            fp += int(actual == -1)
        else:
            tn += int(actual == -1)
            fn += int(actual == 1)
    accepted = tp + tn + fp + fn
    accuracy = (tp + tn) / accepted if accepted else None
    return EvalResult(accuracy, accepted, abstained, tp, tn, fp, fn)


def records_to_labels(records: Sequence[PredictionRecord]) -> dict[str, int]:
    return {r.subject_id: r.rejection_label for r in records}


# ---------------------------------------------------------------------------
# training compositions


def train_uqchi(
    train_panel: LongitudinalPanel,
    c: float,
    tol: float = med_core.DEFAULT_TOL,
    max_iter: int = med_core.DEFAULT_MAX_ITER,
    unobserved_prior: float = 0.5,
) -> tuple[WeightPosterior, DualSolution, DualProblem]:
    """Aggregate the panel, solve the dual and return the weight posterior."""
    prior = LabelPrior.from_panel(train_panel, unobserved=unobserved_prior)
    aggs = aggregates(train_panel, prior)
    problem = DualProblem(aggregate_matrix(aggs), c)
    solution = solve_dual(problem, tol=tol, max_iter=max_iter)
    return med_core.posterior(solution, problem), solution, problem


def _accuracy_on_panel(posterior: WeightPosterior, panel: LongitudinalPanel) -> float | None:
    truth = panel.observed_labels()
    records = [
        r for r in predict_panel(posterior, panel) if r.subject_id in truth
    ]
    if not records:
        return None
    result = evaluate(records_to_labels(records), truth)
    return result.accuracy


def cross_validate_c(
    train_panel: LongitudinalPanel,
    c_grid: Sequence[float],
    folds: int,
    seed: int,
    tol: float = med_core.DEFAULT_TOL,
    max_iter: int = med_core.DEFAULT_MAX_ITER,
) -> float:
    """Pick the margin rate maximizing mean fold accuracy; ties take the
    smallest c.

    Folds partition the labeled subjects; unlabeled subjects stay in every
    training fold. With fewer labeled subjects than folds this degrades to a
    single holdout (with a warning), and with fewer than two it just returns
    the smallest candidate.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    grid = sorted(set(float(c) for c in c_grid))
    if not grid:
        raise ValueError("empty c grid")
    labeled_ids = [s.subject_id for s in train_panel.subjects if s.label is not None]
    if len(labeled_ids) < 2:
        warnings.warn("fewer than two labeled subjects: returning smallest c")
        return grid[0]

    rng = np.random.default_rng(seed)
    shuffled = list(rng.permutation(labeled_ids))
    if len(labeled_ids) < folds:
        warnings.warn(
            f"{len(labeled_ids)} labeled subjects < {folds} folds: "
            "falling back to a single holdout split"
        )
        half = len(shuffled) // 2
        fold_sets = [shuffled[:half]]
    else:
        fold_sets = [list(part) for part in np.array_split(np.array(shuffled), folds)]

    best_c, best_score = None, -np.inf
    for c in grid:
        scores = []
        for heldout in fold_sets:
            heldout_set = set(heldout)
            train_subjects = tuple(
                s for s in train_panel.subjects if s.subject_id not in heldout_set
            )
            eval_subjects = tuple(
                s for s in train_panel.subjects if s.subject_id in heldout_set
            )
            fold_train = LongitudinalPanel(
                train_subjects, standardization=train_panel.standardization
            )
            fold_eval = LongitudinalPanel(
                eval_subjects, standardization=train_panel.standardization
            )
            posterior, _, _ = train_uqchi(fold_train, c, tol=tol, max_iter=max_iter)
            accuracy = _accuracy_on_panel(posterior, fold_eval)
            if accuracy is not None:
                scores.append(accuracy)
        mean_score = float(np.mean(scores)) if scores else -np.inf
        if mean_score > best_score:
            best_c, best_score = c, mean_score
    return best_c


def tune_chi_hyperparams(
    train_panel: LongitudinalPanel,
    grid: Sequence[float] = (0.1, 1.0, 10.0),
    folds: int = 10,
    seed: int = 0,
    steps: int = 400,
    step_size: float = 0.01,
) -> ChiHyperparams:
    """Cross-validate the full product grid over the four term weights.

    Ties prefer the first candidate in sorted order (smallest weights).
    """
    labeled_ids = [s.subject_id for s in train_panel.subjects if s.label is not None]
    if len(labeled_ids) < 2:
        raise ValueError("tuning needs at least two labeled subjects")
    rng = np.random.default_rng(seed)
    shuffled = list(rng.permutation(labeled_ids))
    n_folds = min(folds, len(labeled_ids))
    fold_sets = [list(part) for part in np.array_split(np.array(shuffled), n_folds)]

    values = sorted(set(float(g) for g in grid))
    best, best_score = None, -np.inf
    for alpha, beta, lambda_var, gamma_l1 in product(values, repeat=4):
        hyper = ChiHyperparams(alpha, beta, lambda_var, gamma_l1)
        scores = []
        for heldout in fold_sets:
            heldout_set = set(heldout)
            train_subjects = tuple(
                s for s in train_panel.subjects if s.subject_id not in heldout_set
            )
            if not any(s.label is not None for s in train_subjects):
                continue
            fold_train = LongitudinalPanel(
                train_subjects, standardization=train_panel.standardization
            )
            model = chi_train(fold_train, hyper, steps=steps, step_size=step_size)
            truth = {
                s.subject_id: s.label
                for s in train_panel.subjects
                if s.subject_id in heldout_set
            }
            eval_panel = LongitudinalPanel(
                tuple(s for s in train_panel.subjects if s.subject_id in heldout_set),
                standardization=train_panel.standardization,
            )
            preds = chi_predict_panel(model, eval_panel)
            result = evaluate(preds, truth)
            if result.accuracy is not None:
                scores.append(result.accuracy)
        mean_score = float(np.mean(scores)) if scores else -np.inf
        if mean_score > best_score:
            best, best_score = hyper, mean_score
    return best


# ---------------------------------------------------------------------------
# experiment specification


C_POLICY_CV = "cv"
C_POLICY_FIXED = "fixed"
C_POLICY_SWEEP = "sweep"


def default_sim_config() -> SimConfig:
    """Harness default: fully labeled panels, masking happens in the split."""
    return SimConfig(label_observed_fraction=1.0)


@dataclass(frozen=True)
class ExperimentSpec:
    """Grid definition plus data source (simulation config or a panel CSV)."""

    sim: SimConfig | None = field(default_factory=default_sim_config)
    panel_csv: str | None = None
    c_grid: tuple[float, ...] = (1.5, 3.0, 5.0, 10.0, 20.0, 100.0)
    c_policy: str = C_POLICY_CV
    fixed_c: float = 1.5
    label_ratios: tuple[float, ...] = (0.1, 0.2, 0.5)
    train_ratios: tuple[float, ...] = (0.3, 0.5, 0.7)
    rejection_rates: tuple[float, ...] = (0.2, 0.4, 0.6)
    n_seeds: int = 20
    cv_folds: int = 10
    baselines: tuple[str, ...] = (METHOD_UQCHI, METHOD_CHI)
    chi_hyper: ChiHyperparams = field(default_factory=ChiHyperparams)
    chi_steps: int = 400
    chi_step_size: float = 0.01
    solver_tol: float = med_core.DEFAULT_TOL
    solver_max_iter: int = med_core.DEFAULT_MAX_ITER
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "c_grid", tuple(float(c) for c in self.c_grid))
        object.__setattr__(self, "label_ratios", tuple(float(r) for r in self.label_ratios))
        object.__setattr__(self, "train_ratios", tuple(float(r) for r in self.train_ratios))
        object.__setattr__(
            self, "rejection_rates", tuple(float(r) for r in self.rejection_rates)
        )
        object.__setattr__(self, "baselines", tuple(self.baselines))
        if self.panel_csv is None and self.sim is None:
            raise ValueError("need a data source: sim config or panel CSV")
        if not self.c_grid or not self.label_ratios or not self.train_ratios:
            raise ValueError("grids must be non-empty")
        if any(not 0.0 < r < 1.0 for r in self.label_ratios + self.train_ratios):
            raise ValueError("label and train ratios must lie in (0, 1)")
        if any(not 0.0 <= r < 1.0 for r in self.rejection_rates):
            raise ValueError("rejection rates must lie in [0, 1)")
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be >= 2")
        if self.c_policy not in (C_POLICY_CV, C_POLICY_FIXED, C_POLICY_SWEEP):
            raise ValueError(f"unknown c policy {self.c_policy!r}")
        unknown = set(self.baselines) - {METHOD_UQCHI, METHOD_CHI}
        if unknown or not self.baselines:
            raise ValueError(f"baselines must be drawn from uqchi/chi, got {self.baselines}")

    def to_dict(self) -> dict:
        return {
            "sim": None if self.sim is None else self.sim.to_dict(),
            "panel_csv": self.panel_csv,
            "c_grid": list(self.c_grid),
            "c_policy": self.c_policy,
            "fixed_c": self.fixed_c,
            "label_ratios": list(self.label_ratios),
            "train_ratios": list(self.train_ratios),
            "rejection_rates": list(self.rejection_rates),
            "n_seeds": self.n_seeds,
            "cv_folds": self.cv_folds,
            "baselines": list(self.baselines),
            "chi_hyper": self.chi_hyper.to_dict(),
            "chi_steps": self.chi_steps,
            "chi_step_size": self.chi_step_size,
            "solver_tol": self.solver_tol,
            "solver_max_iter": self.solver_max_iter,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "ExperimentSpec":
        payload = dict(payload)
        if payload.get("sim") is not None:
            payload["sim"] = SimConfig.from_dict(payload["sim"])
        if payload.get("chi_hyper") is not None:
            payload["chi_hyper"] = ChiHyperparams.from_dict(payload["chi_hyper"])
        for key in ("c_grid", "label_ratios", "train_ratios", "rejection_rates", "baselines"):
            if payload.get(key) is not None:
                payload[key] = tuple(payload[key])
        return cls(**payload)

    @classmethod
    def from_json(cls, path) -> "ExperimentSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# result table


@dataclass(frozen=True)
class ResultRow:
    method: str
    label_ratio: float
    train_ratio: float
    rejection_rate: float
    c_key: str
    mean_accuracy: float | None
    std_accuracy: float | None
    n_seeds: int
    mean_abstained: float | None
    n_failed: int


@dataclass(frozen=True)
class ResultTable:
    rows: tuple[ResultRow, ...]

    HEADER = (
        "method,label_ratio,train_ratio,rejection_rate,c,"
        "mean_accuracy,std_accuracy,n_seeds,mean_abstained,n_failed"
    )

    def to_csv_text(self) -> str:
        def cell(value):
            if value is None:
                return ""
            if isinstance(value, float):
                return repr(value)
            return str(value)

        lines = [self.HEADER]
        for r in self.rows:
            lines.append(
                ",".join(
                    [
                        r.method,
                        repr(r.label_ratio),
                        repr(r.train_ratio),
                        repr(r.rejection_rate),
                        r.c_key,
                        cell(r.mean_accuracy),
                        cell(r.std_accuracy),
                        str(r.n_seeds),
                        cell(r.mean_abstained),
                        str(r.n_failed),
                    ]
                )
            )
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class PipelineResult:
    table: ResultTable
    runs: tuple[dict, ...]

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "results.csv").write_text(self.table.to_csv_text())
        with open(out_dir / "runs.jsonl", "w", encoding="utf-8") as fh:
            for run in self.runs:
                fh.write(json.dumps(run, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# pipeline


def _c_cells(spec: ExperimentSpec) -> list[tuple[str, float | None]]:
    if spec.c_policy == C_POLICY_SWEEP:
        return [(repr(c), c) for c in spec.c_grid]
    if spec.c_policy == C_POLICY_FIXED:
        return [(repr(spec.fixed_c), spec.fixed_c)]
    return [(C_POLICY_CV, None)]


def _source_panel(
    spec: ExperimentSpec, seed_index: int
) -> tuple[LongitudinalPanel, dict[str, int]]:
    if spec.panel_csv is not None:
        panel = load_panel(spec.panel_csv)
        return panel, panel.observed_labels()
    sim = replace(spec.sim, seed=spec.seed + seed_index)
    return simulate(sim)


def run_pipeline(spec: ExperimentSpec) -> PipelineResult:
    """Walk the grid; aggregate per-cell accuracy over seeds.

    A failing cell is logged with its coordinates and skipped, never fatal.
    Output is deterministic in the spec: identical specs give byte-identical
    tables and logs.
    """
    cells: dict[tuple, dict] = {}
    runs: list[dict] = []

    def record(key, seed_index, accuracy, abstained, chosen_c=None, error=None):
        cell = cells.setdefault(
            key, {"accuracies": [], "abstained": [], "n_failed": 0}
        )
        runs.append(
            {
                "method": key[0],
                "label_ratio": key[1],
                "train_ratio": key[2],
                "rejection_rate": key[3],
                "c": key[4],
                "seed_index": seed_index,
                "chosen_c": chosen_c,
                "accuracy": accuracy,
                "abstained": abstained,
                "error": error,
            }
        )
        if error is not None:
            cell["n_failed"] += 1
        else:
            if accuracy is not None:
                cell["accuracies"].append(accuracy)
            cell["abstained"].append(abstained)

    for train_ratio in spec.train_ratios:
        for label_ratio in spec.label_ratios:
            for i in range(spec.n_seeds):
                panel, truth = _source_panel(spec, i)
                train, test = split_and_mask(
                    panel,
                    train_fraction=train_ratio,
                    unlabeled_fraction=label_ratio,
                    seed=spec.seed + i + _SPLIT_SEED_OFFSET,
                )
                standardization = fit_standardization(train)
                train_s = apply_standardization(train, standardization)
                test_s = apply_standardization(test, standardization)
                scored_ids = {
                    s.subject_id for s in test_s.subjects if s.subject_id in truth
                }

                if METHOD_UQCHI in spec.baselines:
                    for c_key, c_value in _c_cells(spec):
                        base = (METHOD_UQCHI, label_ratio, train_ratio)
                        try:
                            if c_value is None:
                                chosen_c = cross_validate_c(
                                    train_s,
                                    spec.c_grid,
                                    spec.cv_folds,
                                    seed=spec.seed + i + _CV_SEED_OFFSET,
                                    tol=spec.solver_tol,
                                    max_iter=spec.solver_max_iter,
                                )
                            else:
                                chosen_c = c_value
                            posterior, _, _ = train_uqchi(
                                train_s,
                                chosen_c,
                                tol=spec.solver_tol,
                                max_iter=spec.solver_max_iter,
                            )
                            records = [
                                r
                                for r in predict_panel(posterior, test_s)
                                if r.subject_id in scored_ids
                            ]
                            for rate in spec.rejection_rates:
                                rejected = reject_by_rate(records, rate)
                                result = evaluate(records_to_labels(rejected), truth)
                                record(
                                    base + (rate, c_key),
                                    seed_index=i,
                                    accuracy=result.accuracy,
                                    abstained=result.n_abstained,
                                    chosen_c=chosen_c,
                                )
                        except Exception as exc:  # noqa: BLE001 - cell isolation
                            for rate in spec.rejection_rates:
                                record(
                                    base + (rate, c_key),
                                    seed_index=i,
                                    accuracy=None,
                                    abstained=None,
                                    error=f"{type(exc).__name__}: {exc}",
                                )

                if METHOD_CHI in spec.baselines:
                    key = (METHOD_CHI, label_ratio, train_ratio, 0.0, "")
                    try:
                        model = chi_train(
                            train_s,
                            spec.chi_hyper,
                            steps=spec.chi_steps,
                            step_size=spec.chi_step_size,
                        )
                        preds = {
                            sid: label
                            for sid, label in chi_predict_panel(model, test_s).items()
                            if sid in scored_ids
                        }
                        result = evaluate(preds, truth)
                        record(
                            key,
                            seed_index=i,
                            accuracy=result.accuracy,
                            abstained=result.n_abstained,
                        )
                    except Exception as exc:  # noqa: BLE001 - cell isolation
                        record(
                            key,
                            seed_index=i,
                            accuracy=None,
                            abstained=None,
                            error=f"{type(exc).__name__}: {exc}",
                        )

    rows = []
    for key, cell in cells.items():
        method, label_ratio, train_ratio, rate, c_key = key
        accs = cell["accuracies"]
        abstained = [a for a in cell["abstained"] if a is not None]
        mean_acc = float(np.mean(accs)) if accs else None
        std_acc = (
            float(np.std(accs, ddof=1)) if len(accs) > 1 else (0.0 if accs else None)
        )
        rows.append(
            ResultRow(
                method=method,
                label_ratio=label_ratio,
                train_ratio=train_ratio,
                rejection_rate=rate,
                c_key=c_key,
                mean_accuracy=mean_acc,
                std_accuracy=std_acc,
                n_seeds=len(accs),
                mean_abstained=float(np.mean(abstained)) if abstained else None,
                n_failed=cell["n_failed"],
            )
        )
    return PipelineResult(table=ResultTable(tuple(rows)), runs=tuple(runs))
