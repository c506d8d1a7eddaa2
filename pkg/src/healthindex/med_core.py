"""Concave dual problem for the max-entropy index learner.

Training reduces to maximizing

    J(lam) = sum_n [lam_n + log(1 - lam_n / c)] - 0.5 * ||v(lam)||^2,
    v(lam) = sum_n lam_n * a_n,

over the box 0 <= lam_n < c, where a_n is the per-subject aggregate vector
and c is the rate of the exponential margin prior. J is smooth and strictly
concave on the open box (the log barrier diverges at lam_n = c), so the
optimum is unique and certified by the projected-gradient KKT conditions.
The solver warm-starts from an equivalent d-dimensional strongly convex
problem and finishes with damped Newton ascent in multiplier space.
The weight posterior under a standard normal prior is N(v(lam*), I).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateProblem, DimensionMismatch, DomainError, NonConvergence

FORMAT_VERSION = 1

# relative safety margin keeping the barrier finite during line searches
BOX_MARGIN = 1e-8

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 10_000
ARMIJO_SIGMA = 1e-4
MAX_BACKTRACKS = 60
MAX_POLISH_STEPS = 50
MAX_COORDINATE_SWEEPS = 20_000


@dataclass(frozen=True)
class DualProblem:
    """Aggregate matrix (N, d) plus the margin-prior rate c > 0.

    c <= 1 is legal but puts the barrier-only maximizer at lam = 0; a warning
    flags it because such problems carry no data force at all when the
    aggregates vanish.
    """

    aggregates: np.ndarray
    c: float

    def __post_init__(self):
        arr = np.array(self.aggregates, dtype=float)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise DimensionMismatch("aggregates must be a non-empty (N, d) matrix")
        arr.setflags(write=False)
        object.__setattr__(self, "aggregates", arr)
        object.__setattr__(self, "c", float(self.c))
        if self.c <= 0:
            raise ValueError("margin prior rate c must be positive")
        if self.c <= 1:
            warnings.warn(
                f"c={self.c} <= 1: barrier term is maximized at lambda = 0",
                UserWarning,
                stacklevel=2,
            )

    @property
    def n_subjects(self) -> int:
        return self.aggregates.shape[0]

    @property
    def d(self) -> int:
        return self.aggregates.shape[1]

    @property
    def box_upper(self) -> float:
        return self.c * (1.0 - BOX_MARGIN)


@dataclass(frozen=True)
class DualSolution:
    lam: np.ndarray
    objective: float
    grad_norm: float
    iterations: int
    converged: bool

    def __post_init__(self):
        arr = np.array(self.lam, dtype=float)
        arr.setflags(write=False)
        object.__setattr__(self, "lam", arr)


@dataclass(frozen=True)
class WeightPosterior:
    """Gaussian posterior over index weights: mean v(lam*), identity covariance."""

    mean: np.ndarray

    def __post_init__(self):
        arr = np.array(self.mean, dtype=float)
        arr.setflags(write=False)
        object.__setattr__(self, "mean", arr)

    @property
    def d(self) -> int:
        return self.mean.shape[0]


def _check_lambda(lam: np.ndarray, problem: DualProblem) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (problem.n_subjects,):
        raise DimensionMismatch(
            f"lambda has shape {lam.shape}, expected ({problem.n_subjects},)"
        )
    if np.any(lam < 0):
        raise DomainError("lambda must be non-negative")
    if np.any(lam >= problem.c):
        raise DomainError(f"lambda must stay below c={problem.c}")
    return lam


def potential_vector(lam: Sequence[float], aggregates: np.ndarray) -> np.ndarray:
    """v(lam) = sum_n lam_n * a_n."""
    lam = np.asarray(lam, dtype=float)
    aggregates = np.asarray(aggregates, dtype=float)
    if lam.ndim != 1 or aggregates.ndim != 2 or lam.shape[0] != aggregates.shape[0]:
        raise DimensionMismatch("lambda length must match the number of aggregates")
    if np.any(lam < 0):
        raise DomainError("lambda must be non-negative")
    return aggregates.T @ lam


def log_partition(lam: Sequence[float], problem: DualProblem) -> float:
    """log Z(lam) = 0.5 ||v||^2 + sum_n [-lam_n - log(1 - lam_n / c)]."""
    lam = _check_lambda(lam, problem)
    v = problem.aggregates.T @ lam
    return float(0.5 * v @ v - lam.sum() - np.log1p(-lam / problem.c).sum())


def dual_objective(lam: Sequence[float], problem: DualProblem) -> float:
    """J(lam) = sum_n [lam_n + log(1 - lam_n / c)] - 0.5 ||v||^2 = -log Z."""
    lam = _check_lambda(lam, problem)
    v = problem.aggregates.T @ lam
    return float(lam.sum() + np.log1p(-lam / problem.c).sum() - 0.5 * v @ v)


def dual_gradient(lam: Sequence[float], problem: DualProblem) -> np.ndarray:
    """dJ/dlam_n = 1 - 1/(c - lam_n) - a_n . v(lam)."""
    lam = _check_lambda(lam, problem)
    v = problem.aggregates.T @ lam
    return 1.0 - 1.0 / (problem.c - lam) - problem.aggregates @ v


def projected_gradient(lam: np.ndarray, grad: np.ndarray, upper: float) -> np.ndarray:
    """Gradient with components clipped where the box blocks ascent."""
    pg = grad.copy()
    pg[(lam <= 0.0) & (grad < 0.0)] = 0.0
    pg[(lam >= upper) & (grad > 0.0)] = 0.0
    return pg


def _initial_lambda(problem: DualProblem) -> np.ndarray:
    start = min(0.5, max((problem.c - 1.0) / 2.0, 1e-3))
    start = min(start, problem.box_upper / 2.0)
    return np.full(problem.n_subjects, start)


def _presolve_potential(problem: DualProblem, max_iter: int = 150) -> np.ndarray:
    """Warm-start multipliers from the d-dimensional potential problem.

    Eliminating lambda coordinate-wise turns the dual into an unconstrained
    strongly convex problem in the potential vector v:

        minimize F(v) = 0.5 ||v||^2 + sum_n phi(a_n . v),

    where phi(t) is the per-subject maximum of lam + log(1 - lam/c) - lam*t
    over the box, with maximizer lam*(t) = clip(c - 1/(1 - t)). Newton on F
    has Hessian I + A^T W A (eigenvalues >= 1), so it is immune to the
    Gram conditioning that slows lambda-space ascent when N > d.
    """
    aggs = problem.aggregates
    c = problem.c
    upper = problem.box_upper
    d = aggs.shape[1]
    knee = 1.0 - 1.0 / c

    def lam_of(t):
        with np.errstate(divide="ignore", over="ignore"):
            lam = c - 1.0 / (1.0 - t)
        return np.clip(np.where(t < knee, lam, 0.0), 0.0, upper)

    def value(v):
        t = aggs @ v
        lam = lam_of(t)
        with np.errstate(divide="ignore", invalid="ignore"):
            barrier = np.where(lam > 0.0, lam + np.log1p(-lam / c), 0.0)
        return 0.5 * float(v @ v) + float(np.sum(barrier - lam * t))

    v = np.zeros(d)
    t = aggs @ v
    lam = lam_of(t)
    f_value = value(v)
    for _ in range(max_iter):
        grad = v - aggs.T @ lam
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= 1e-12 * max(1.0, float(np.linalg.norm(v))):
            break
        weights = np.where((lam > 0.0) & (lam < upper), 1.0 / (1.0 - t) ** 2, 0.0)
        hessian = aggs.T @ (aggs * weights[:, None])
        hessian[np.diag_indices_from(hessian)] += 1.0
        try:
            step_dir = np.linalg.solve(hessian, grad)
        except np.linalg.LinAlgError:
            step_dir = grad
        step = 1.0
        accepted = False
        for _ in range(40):
            candidate = v - step * step_dir
            cand_value = value(candidate)
            if cand_value < f_value:
                v, f_value = candidate, cand_value
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        t = aggs @ v
        lam = lam_of(t)
    return lam_of(aggs @ v)


def _coordinate_optimum(c: float, upper: float, residual: float, row_norm_sq: float) -> float:
    """Exact maximizer over one coordinate, the others held fixed.

    Solves 1 - 1/(c - lam) - residual - row_norm_sq * lam = 0 on [0, upper],
    where residual is a_n . v without this coordinate's own contribution.
    The 1-d function is strictly concave with a barrier at c, so the
    stationary point is the unique root of a quadratic; no root means the
    maximum sits at the lower bound.
    """
    slope0 = 1.0 - 1.0 / c - residual
    if slope0 <= 0.0:
        return 0.0
    if row_norm_sq == 0.0:
        return min(upper, c - 1.0 / (1.0 - residual))
    # q lam^2 - ((1 - r) + q c) lam + ((1 - r) c - 1) = 0
    q = row_norm_sq
    b = (1.0 - residual) + q * c
    const = (1.0 - residual) * c - 1.0
    disc = b * b - 4.0 * q * const
    if disc < 0.0:
        return 0.0
    sqrt_disc = np.sqrt(disc)
    # stable smaller root; the larger one lies beyond the barrier
    root = (
        (b - sqrt_disc) / (2.0 * q)
        if b <= 0.0
        else (2.0 * const) / (b + sqrt_disc)
    )
    return min(max(root, 0.0), upper)


def solve_dual(
    problem: DualProblem,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    scaling: str = "newton",
    callback: Callable[[int, np.ndarray, float], None] | None = None,
    raise_on_nonconvergence: bool = True,
) -> DualSolution:
    """Projected ascent on the box [0, c)^N to a KKT certificate.

    The default path warm-starts from the d-dimensional potential problem,
    then takes Armijo-backtracked ascent steps; the objective at accepted
    iterates never decreases (the callback sees exactly these iterates).
    Near the optimum true per-step gains drop below float resolution, so a
    bounded polish phase keeps stepping with the same direction rule but
    accepts only steps that strictly shrink the projected-gradient norm,
    and a final exact coordinate-ascent sweep covers anything left. Exits
    once that norm reaches ``tol``, which certifies the KKT conditions
    componentwise.

    ``scaling`` picks the ascent direction:

    - ``"newton"`` (default): exact Newton step on the free coordinates,
      using the closed-form Hessian barrier-diagonal + Gram matrix. The
      Gram coupling makes diagonal preconditioning arbitrarily slow on
      correlated aggregates, so the full solve is the only variant that
      reliably reaches tight tolerances.
    - ``"diag_newton"``: inverse diagonal curvature 1/(c - lam)^2 + ||a_n||^2.
    - ``"plain"``: raw gradient.

    Deterministic given inputs.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if scaling not in ("newton", "diag_newton", "plain"):
        raise ValueError(f"unknown scaling {scaling!r}")
    if not np.any(problem.aggregates) and problem.c <= 1.0:
        raise DegenerateProblem(
            "all aggregates are zero and c <= 1: maximizer is the boundary point "
            "lambda = 0"
        )

    upper = problem.box_upper
    aggs = problem.aggregates
    n_subjects, d = aggs.shape
    row_sq = np.einsum("nd,nd->n", aggs, aggs)
    edge = 1e-12 * problem.c

    def diag_direction(lam, grad):
        return grad / (1.0 / (problem.c - lam) ** 2 + row_sq)

    def newton_direction(lam, grad, damping):
        """Two-metric damped Newton step.

        Coordinates within the projected-gradient displacement of a bound
        and pushing outward are treated first order (diagonal metric), so the
        Newton block only couples coordinates that stay interior; clipping a
        raw Newton step otherwise wrecks the coupled move. The Hessian of -J
        is diag(1/(c - lam)^2) + A A^T, whose spectrum spans the tiny barrier
        curvature up to the largest Gram eigenvalue; Levenberg damping bounds
        the step on the near-null Gram directions, and the Woodbury form
        keeps the linear system well conditioned when d < N.
        """
        curvature = 1.0 / (problem.c - lam) ** 2 + damping
        displacement = np.clip(lam + grad, 0.0, upper) - lam
        eps_active = max(edge, min(0.01 * problem.c, float(np.linalg.norm(displacement))))
        near_low = (lam <= eps_active) & (grad < 0.0)
        near_high = (lam >= upper - eps_active) & (grad > 0.0)
        free = ~(near_low | near_high)
        direction = grad / (curvature + row_sq)
        if not np.any(free):
            return direction
        a_free = aggs[free]
        curv_free = curvature[free]
        g_free = grad[free]
        try:
            if a_free.shape[0] <= d:
                hessian = a_free @ a_free.T
                hessian[np.diag_indices_from(hessian)] += curv_free
                direction[free] = np.linalg.solve(hessian, g_free)
            else:
                scaled = a_free / curv_free[:, None]
                core = a_free.T @ scaled
                core[np.diag_indices_from(core)] += 1.0
                rhs = scaled.T @ g_free
                direction[free] = g_free / curv_free - scaled @ np.linalg.solve(core, rhs)
        except np.linalg.LinAlgError:
            pass
        return direction

    def pg_norm_at(lam, grad):
        return float(np.linalg.norm(projected_gradient(lam, grad, upper)))

    if scaling == "newton" and d < n_subjects and np.any(aggs):
        lam = _presolve_potential(problem)
    else:
        lam = _initial_lambda(problem)
    obj = dual_objective(lam, problem)
    if callback is not None:
        callback(0, lam, obj)

    iterations = 0
    converged = False
    grad = dual_gradient(lam, problem)
    pg_norm = pg_norm_at(lam, grad)
    damping = 0.0

    for _ in range(max_iter):
        if pg_norm <= tol:
            converged = True
            break
        accepted = False
        if scaling == "newton":
            # Levenberg schedule: grow damping until a step is accepted,
            # relax it again afterwards so the endgame is pure Newton
            for _ in range(MAX_BACKTRACKS):
                candidate = np.clip(lam + newton_direction(lam, grad, damping), 0.0, upper)
                gain = float(grad @ (candidate - lam))
                if gain > 0.0:
                    cand_obj = dual_objective(candidate, problem)
                    if cand_obj >= obj + ARMIJO_SIGMA * gain:
                        lam, obj = candidate, cand_obj
                        accepted = True
                        damping = 0.0 if damping < 1e-10 else damping / 8.0
                        break
                damping = max(damping * 10.0, 1e-8)
                if damping > 1e14:
                    break
        else:
            direction = diag_direction(lam, grad) if scaling == "diag_newton" else grad
            step = 1.0
            for _ in range(MAX_BACKTRACKS):
                candidate = np.clip(lam + step * direction, 0.0, upper)
                gain = float(grad @ (candidate - lam))
                if gain <= 0.0:
                    break
                cand_obj = dual_objective(candidate, problem)
                if cand_obj >= obj + ARMIJO_SIGMA * gain:
                    lam, obj = candidate, cand_obj
                    accepted = True
                    break
                step *= 0.5
        if not accepted:
            # per-step gains fell below float resolution; hand over to polish
            break
        iterations += 1
        if callback is not None:
            callback(iterations, lam, obj)
        grad = dual_gradient(lam, problem)
        pg_norm = pg_norm_at(lam, grad)

    for _ in range(MAX_POLISH_STEPS):
        if pg_norm <= tol:
            converged = True
            break
        accepted = False
        damping = 0.0
        for _ in range(MAX_BACKTRACKS):
            if scaling == "newton":
                candidate = np.clip(lam + newton_direction(lam, grad, damping), 0.0, upper)
                damping = max(damping * 10.0, 1e-8)
            else:
                step = 0.5 ** damping if damping else 1.0
                direction = (
                    diag_direction(lam, grad) if scaling != "plain" else grad
                )
                candidate = np.clip(lam + step * direction, 0.0, upper)
                damping += 1.0
            cand_grad = dual_gradient(candidate, problem)
            cand_norm = pg_norm_at(candidate, cand_grad)
            if cand_norm < pg_norm:
                lam, grad, pg_norm = candidate, cand_grad, cand_norm
                accepted = True
                break
        if not accepted:
            break
        iterations += 1

    if pg_norm > tol:
        # exact cyclic coordinate ascent: conditioning-proof last resort
        lam = lam.copy()
        v = aggs.T @ lam
        for sweep in range(MAX_COORDINATE_SWEEPS):
            moved = 0.0
            for n in range(problem.n_subjects):
                a_n = aggs[n]
                residual = float(a_n @ v) - lam[n] * row_sq[n]
                new = _coordinate_optimum(problem.c, upper, residual, row_sq[n])
                delta = new - lam[n]
                if delta != 0.0:
                    v += delta * a_n
                    lam[n] = new
                    moved = max(moved, abs(delta))
            iterations += 1
            if sweep % 64 == 63:
                v = aggs.T @ lam  # refresh accumulated rounding drift
            grad = dual_gradient(lam, problem)
            pg_norm = pg_norm_at(lam, grad)
            if pg_norm <= tol or moved == 0.0:
                break

    converged = converged or pg_norm <= tol

    solution = DualSolution(
        lam=lam,
        objective=dual_objective(lam, problem),
        grad_norm=pg_norm,
        iterations=iterations,
        converged=converged,
    )
    if not converged and raise_on_nonconvergence:
        raise NonConvergence(
            f"projected gradient norm {pg_norm:.3e} > tol {tol:.3e} after "
            f"{iterations} iterations",
            solution=solution,
        )
    return solution


def posterior(
    solution: DualSolution, problem: DualProblem, force: bool = False
) -> WeightPosterior:
    """Gaussian weight posterior N(v(lam*), I) at the dual optimum."""
    if not solution.converged and not force:
        raise NonConvergence(
            "refusing to build a posterior from an unconverged solution "
            "(pass force=True to override)",
            solution=solution,
        )
    return WeightPosterior(potential_vector(solution.lam, problem.aggregates))


# ---------------------------------------------------------------------------
# model file


def model_payload(
    problem: DualProblem,
    solution: DualSolution,
    standardization_dict: dict | None = None,
) -> dict:
    """JSON-ready dict holding the solution, posterior mean and provenance."""
    post = posterior(solution, problem, force=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "model": "med",
        "d": problem.d,
        "n_subjects": problem.n_subjects,
        "c": problem.c,
        "lambda": solution.lam.tolist(),
        "mean_weights": post.mean.tolist(),
        "convergence": {
            "objective": solution.objective,
            "grad_norm": solution.grad_norm,
            "iterations": solution.iterations,
            "converged": solution.converged,
        },
    }
    if standardization_dict is not None:
        payload["standardization"] = standardization_dict
    return payload


def save_model(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_model(path) -> dict:
    payload = json.loads(Path(path).read_text())
    if payload.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format: {payload.get('format_version')}")
    return payload


def posterior_from_payload(payload: dict) -> WeightPosterior:
    if payload.get("model") != "med":
        raise ValueError(f"not a med model payload: {payload.get('model')!r}")
    return WeightPosterior(np.asarray(payload["mean_weights"], dtype=float))
