"""Cost-biased maximum-likelihood estimation of partially known plants.

Each estimator minimizes, over the free entries of its masked (A, B),

    W(theta) = bias_k * trace(X(A_hat, B_hat)) + sum_t |x(t) - A_hat x(t-1) - B_hat u(t-1)|^2

subject to the box bounds, with known entries pinned to their true values
and graph zeros pinned to zero.  The residual sum is evaluated from cached
sufficient statistics so one evaluation costs O(p^2) in the combined
state+input dimension, independent of the history length.

The bias term pulls the estimate toward models with a cheaper optimal cost,
which is what prevents certainty-equivalence lock-in at a wrong model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import Bounds, minimize

from .errors import (
    AllStartsInfeasible,
    DimensionMismatch,
    InfeasiblePoint,
    NonConvergence,
)
from .matlin import dare_trace, dare_trace_batch
from .plantspace import EntryClass, PlantFamily, PlantInstance

_START_STREAM_TAG = 0xE571

# ties between start candidates closer than this prefer the earlier
# (warm-start-first) candidate
_TIE_TOL = 1e-12


# ---------------------------------------------------------------------------
# observation history


class History:
    """Observed states and inputs plus cached regression statistics.

    States run one longer than inputs: after k steps the history holds
    x(0..k) and u(0..k-1).  ``phi_gram``, ``cross`` and ``sq_norm`` cache
    sum phi phi', sum x_next phi', and sum |x_next|^2 over completed
    transitions with phi = [x; u].
    """

    def __init__(self, n: int, m: int):
        self.n = n
        self.m = m
        self.states: list[np.ndarray] = []
        self.inputs: list[np.ndarray] = []
        p = n + m
        self.phi_gram = np.zeros((p, p))
        self.cross = np.zeros((n, p))
        self.sq_norm = 0.0

    @property
    def n_pairs(self) -> int:
        return len(self.inputs) if len(self.states) > len(self.inputs) else max(
            0, len(self.states) - 1
        )

    def append_state(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise DimensionMismatch(f"state must have shape ({self.n},)")
        if self.states and len(self.inputs) == len(self.states):
            phi = np.concatenate([self.states[-1], self.inputs[-1]])
            self.phi_gram += np.outer(phi, phi)
            self.cross += np.outer(x, phi)
            self.sq_norm += float(x @ x)
        self.states.append(x)

    def append_input(self, u: np.ndarray) -> None:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.m,):
            raise DimensionMismatch(f"input must have shape ({self.m},)")
        if len(self.inputs) >= len(self.states):
            raise ValueError("append the observed state before its input")
        self.inputs.append(u)

    def residual_sum(self, theta_mat: np.ndarray) -> float:
        """sum_t |x(t) - Theta phi(t-1)|^2 from the cached statistics."""
        quad = float(((theta_mat @ self.phi_gram) * theta_mat).sum())
        lin = float((theta_mat * self.cross).sum())
        return self.sq_norm - 2.0 * lin + quad

    def residual_sum_naive(self, a_hat: np.ndarray, b_hat: np.ndarray) -> float:
        """O(k) recomputation, used to spot-check the cached statistics."""
        total = 0.0
        for t in range(1, len(self.states)):
            pred = a_hat @ self.states[t - 1] + b_hat @ self.inputs[t - 1]
            diff = self.states[t] - pred
            total += float(diff @ diff)
        return total


# ---------------------------------------------------------------------------
# bias weight schedule


@dataclass(frozen=True)
class BiasSchedule:
    """Weight on the trace regularizer as a function of the step index.

    The weight must grow without bound but slower than log(k); the default
    ``sqrt-log`` schedule is sqrt(ln(k + e)).  A custom table of
    (step, weight) pairs is interpolated linearly and clamped at the ends.
    """

    kind: str = "sqrt-log"
    table: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if self.kind not in ("sqrt-log", "custom"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "custom":
            if not self.table:
                raise ValueError("custom schedule needs a table")
            steps = [s for s, _ in self.table]
            weights = [w for _, w in self.table]
            if steps != sorted(steps):
                raise ValueError("table steps must be increasing")
            if any(b < a for a, b in zip(weights, weights[1:])):
                raise ValueError("table weights must be nondecreasing")
            object.__setattr__(self, "table", tuple((float(s), float(w)) for s, w in self.table))

    def weight(self, k: int) -> float:
        if self.kind == "sqrt-log":
            return math.sqrt(math.log(k + math.e))
        steps = [s for s, _ in self.table]
        weights = [w for _, w in self.table]
        return float(np.interp(k, steps, weights))


# ---------------------------------------------------------------------------
# bound estimation problem


@dataclass(frozen=True)
class ParameterProblem:
    """A mask bound to a concrete truth: what one estimator searches over.

    ``base`` holds the pinned combined (A | B) entries (true values for
    design-known entries, family constants, zeros); ``free_rows/free_cols``
    index the decision variables, bounded by ``lo``/``hi``.
    """

    base: np.ndarray
    free_rows: np.ndarray
    free_cols: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    labels: tuple[str, ...]
    q: np.ndarray
    r: np.ndarray
    n: int
    m: int
    truth: np.ndarray  # true values of the free entries, for diagnostics

    @classmethod
    def build(
        cls,
        family: PlantFamily,
        plant: PlantInstance,
        mask: np.ndarray,
    ) -> "ParameterProblem":
        n, m = family.info.n, family.info.m
        combined_truth = np.hstack([plant.a, plant.b])
        base = np.where(mask == EntryClass.KNOWN, combined_truth, 0.0)
        rows, cols = np.nonzero(mask == EntryClass.FREE)
        lo = np.empty(rows.size)
        hi = np.empty(rows.size)
        labels = []
        bounds_by_pos = {
            (i, c): (label, blo, bhi) for label, i, c, blo, bhi in family.free_entries()
        }
        for k, (i, c) in enumerate(zip(rows, cols)):
            label, blo, bhi = bounds_by_pos[(int(i), int(c))]
            lo[k], hi[k] = blo, bhi
            labels.append(label)
        truth = combined_truth[rows, cols]
        return cls(
            base=base, free_rows=rows, free_cols=cols, lo=lo, hi=hi,
            labels=tuple(labels), q=family.q, r=family.r, n=n, m=m, truth=truth,
        )

    @property
    def dim(self) -> int:
        return self.free_rows.size

    def theta_matrix(self, theta: np.ndarray) -> np.ndarray:
        mat = self.base.copy()
        mat[self.free_rows, self.free_cols] = theta
        return mat

    def split(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mat = self.theta_matrix(theta)
        return mat[:, : self.n], mat[:, self.n :]

    def clamp(self, theta: np.ndarray) -> np.ndarray:
        return np.clip(theta, self.lo, self.hi)

    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def in_box(self, theta: np.ndarray, slack: float = 1e-9) -> bool:
        return bool(
            np.all(theta >= self.lo - slack) and np.all(theta <= self.hi + slack)
        )


def problem_for_subsystem(
    family: PlantFamily, plant: PlantInstance, subsystem: int
) -> ParameterProblem:
    from .plantspace import known_mask

    return ParameterProblem.build(family, plant, known_mask(family, subsystem))


def centralized_problem(family: PlantFamily, plant: PlantInstance) -> ParameterProblem:
    from .plantspace import no_knowledge_mask

    return ParameterProblem.build(family, plant, no_knowledge_mask(family))


# ---------------------------------------------------------------------------
# objective


class _Evaluator:
    """Objective closure threading a Riccati warm start between evaluations."""

    def __init__(
        self,
        problem: ParameterProblem,
        bias_k: float,
        hist: History | None,
        x_warm: np.ndarray | None = None,
    ):
        self.problem = problem
        self.bias_k = bias_k
        self.hist = hist if hist is not None and hist.n_pairs else None
        self.x_warm = x_warm
        self.n_evals = 0
        self.lo_slack = problem.lo - 1e-9
        self.hi_slack = problem.hi + 1e-9

    def __call__(self, theta: np.ndarray) -> float:
        self.n_evals += 1
        problem = self.problem
        if (theta < self.lo_slack).any() or (theta > self.hi_slack).any():
            return np.inf
        mat = problem.base.copy()
        mat[problem.free_rows, problem.free_cols] = theta
        if self.bias_k != 0.0:
            a_hat = mat[:, : problem.n]
            b_hat = mat[:, problem.n :]
            try:
                tr, x = dare_trace(
                    a_hat, b_hat, problem.q, problem.r, x0=self.x_warm
                )
            except NonConvergence:
                # retry cold: a stale warm start can stall near basin edges
                try:
                    tr, x = dare_trace(a_hat, b_hat, problem.q, problem.r)
                except NonConvergence:
                    return np.inf
            self.x_warm = x
            value = self.bias_k * tr
        else:
            value = 0.0
        if self.hist is not None:
            value += self.hist.residual_sum(mat)
        return value


def cbml_objective(
    theta: np.ndarray,
    problem: ParameterProblem,
    bias_k: float,
    hist: History | None,
) -> float:
    """Cost-biased ML objective at one feasible point.

    Raises :class:`InfeasiblePoint` when theta leaves the box or the Riccati
    preconditions fail there; optimizers treat that as +inf.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (problem.dim,):
        raise DimensionMismatch(f"theta must have shape ({problem.dim},)")
    if not problem.in_box(theta):
        raise InfeasiblePoint("theta outside the family box")
    value = _Evaluator(problem, bias_k, hist)(theta)
    if not np.isfinite(value):
        raise InfeasiblePoint("Riccati preconditions fail at theta")
    return value


# ---------------------------------------------------------------------------
# least-squares anchor


def pure_ls_start(problem: ParameterProblem, hist: History) -> np.ndarray:
    """Unregularized least-squares estimate of the free entries, clamped.

    Solves the masked linear regression via the cached statistics; free
    entries in different state rows decouple.  Rank-deficient directions get
    the minimum-norm solution; never-excited coordinates (zero regressor
    energy) fall back to the box midpoint.
    """
    if hist.n_pairs < 1:
        raise ValueError("least-squares start needs at least one transition")
    p = problem.dim
    if p == 0:
        return np.empty(0)
    rows = problem.free_rows
    cols = problem.free_cols
    # normal equations decouple across state rows: entries in different rows
    # never share a residual term
    same_row = rows[:, None] == rows[None, :]
    h = hist.phi_gram[np.ix_(cols, cols)] * same_row
    rhs = hist.cross[rows, cols] - (problem.base[rows, :] * hist.phi_gram[:, cols].T).sum(axis=1)
    theta, *_ = np.linalg.lstsq(h, rhs, rcond=None)
    energy = np.diag(hist.phi_gram)[cols]
    theta = np.where(energy <= 1e-12, problem.midpoint(), theta)
    return problem.clamp(theta)


# ---------------------------------------------------------------------------
# grid scan (trace term is data independent, so it caches well)


def grid_points(problem: ParameterProblem, axis_points: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, axis_points) for lo, hi in zip(problem.lo, problem.hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def grid_traces(problem: ParameterProblem, thetas: np.ndarray) -> np.ndarray:
    """Riccati traces over a stack of free-parameter vectors (inf = infeasible)."""
    g = thetas.shape[0]
    mats = np.broadcast_to(problem.base, (g,) + problem.base.shape).copy()
    mats[:, problem.free_rows, problem.free_cols] = thetas
    a_s = mats[:, :, : problem.n]
    b_s = mats[:, :, problem.n :]
    return dare_trace_batch(a_s, b_s, problem.q, problem.r)


def grid_residuals(problem: ParameterProblem, thetas: np.ndarray, hist: History) -> np.ndarray:
    g = thetas.shape[0]
    mats = np.broadcast_to(problem.base, (g,) + problem.base.shape).copy()
    mats[:, problem.free_rows, problem.free_cols] = thetas
    quad = np.einsum("gij,jk,gik->g", mats, hist.phi_gram, mats)
    lin = np.einsum("gij,ij->g", mats, hist.cross)
    return hist.sq_norm - 2.0 * lin + quad


# ---------------------------------------------------------------------------
# multi-start minimization


@dataclass(frozen=True)
class SolverOptions:
    """Knobs for the box-constrained multi-start Nelder-Mead search."""

    nm_max_iter: int = 400
    fatol: float = 1e-9
    xatol: float = 1e-8
    n_random_starts: int = 5
    grid_axis_points: int = 25
    grid_max_dim: int = 3


@dataclass(frozen=True)
class SolverReport:
    starts_used: int
    best_start: str
    inner_iterations: int
    n_evals: int


@dataclass(frozen=True)
class LocalEstimate:
    """One estimator's current model of the whole plant."""

    a_hat: np.ndarray
    b_hat: np.ndarray
    theta: np.ndarray
    objective: float
    report: SolverReport


def _small_simplex(problem: ParameterProblem, theta0: np.ndarray, rel_step: float) -> np.ndarray:
    """Initial simplex around theta0, stepping inward at the box boundary."""
    p = problem.dim
    widths = problem.hi - problem.lo
    steps = np.maximum(rel_step * widths, 1e-8)
    sim = np.tile(theta0, (p + 1, 1))
    for i in range(p):
        h = steps[i]
        sim[i + 1, i] += h if theta0[i] + h <= problem.hi[i] else -h
    return sim


def _nm_polish(
    evaluator: _Evaluator,
    theta0: np.ndarray,
    options: SolverOptions,
    problem: ParameterProblem,
    rel_step: float | None = None,
) -> tuple[np.ndarray, float, int]:
    if problem.dim == 0:
        return theta0, evaluator(theta0), 0
    nm_options = {
        "maxiter": options.nm_max_iter,
        "fatol": options.fatol,
        "xatol": options.xatol,
    }
    if rel_step is not None:
        nm_options["initial_simplex"] = _small_simplex(problem, theta0, rel_step)
    res = minimize(
        evaluator,
        theta0,
        method="Nelder-Mead",
        bounds=Bounds(problem.lo, problem.hi),
        options=nm_options,
    )
    theta = problem.clamp(np.asarray(res.x, dtype=float))
    return theta, float(res.fun), int(res.nit)


def _finish(
    problem: ParameterProblem,
    candidates: list[tuple[str, np.ndarray, float]],
    n_starts: int,
    iterations: int,
    n_evals: int,
) -> LocalEstimate:
    feasible = [(name, th, obj) for name, th, obj in candidates if np.isfinite(obj)]
    if not feasible:
        raise AllStartsInfeasible(
            "every start violates the Riccati preconditions"
        )
    best_obj = min(obj for _, _, obj in feasible)
    name, theta, obj = next(
        (c for c in feasible if c[2] <= best_obj + _TIE_TOL)
    )
    a_hat, b_hat = problem.split(theta)
    return LocalEstimate(
        a_hat=a_hat,
        b_hat=b_hat,
        theta=theta,
        objective=obj,
        report=SolverReport(
            starts_used=n_starts,
            best_start=name,
            inner_iterations=iterations,
            n_evals=n_evals,
        ),
    )


def cbml_minimize(
    problem: ParameterProblem,
    bias_k: float,
    hist: History | None,
    warm_start: np.ndarray | None = None,
    rng_seed: int = 0,
    options: SolverOptions = SolverOptions(),
    grid_trace_cache: tuple[np.ndarray, np.ndarray] | None = None,
    x_warm: np.ndarray | None = None,
) -> LocalEstimate:
    """Full multi-start minimization of the cost-biased ML objective.

    Starts: the warm start (previous estimate), the least-squares anchor,
    the box midpoint, seeded uniform draws, and (for at most
    ``grid_max_dim`` free parameters) the best point of a coarse grid scan.
    Nelder-Mead runs from every start; the result is never worse than any
    start, and ties within 1e-12 keep the earliest candidate so a warm start
    wins against equal alternatives.
    """
    if problem.dim == 0:
        theta = np.empty(0)
        evaluator = _Evaluator(problem, bias_k, hist, x_warm=x_warm)
        obj = evaluator(theta)
        return _finish(problem, [("exact", theta, obj)], 1, 0, evaluator.n_evals)

    evaluator = _Evaluator(problem, bias_k, hist, x_warm=x_warm)
    starts: list[tuple[str, np.ndarray]] = []
    if warm_start is not None:
        starts.append(("warm", problem.clamp(np.asarray(warm_start, dtype=float))))
    if hist is not None and hist.n_pairs >= 1:
        starts.append(("least-squares", pure_ls_start(problem, hist)))
    starts.append(("midpoint", problem.midpoint()))
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence([int(rng_seed) & 0xFFFFFFFFFFFFFFFF, _START_STREAM_TAG]))
    )
    for i in range(options.n_random_starts):
        draw = problem.lo + (problem.hi - problem.lo) * rng.random(problem.dim)
        starts.append((f"uniform-{i}", draw))
    if problem.dim <= options.grid_max_dim:
        if grid_trace_cache is None:
            thetas = grid_points(problem, options.grid_axis_points)
            traces = grid_traces(problem, thetas)
        else:
            thetas, traces = grid_trace_cache
        objective_grid = bias_k * traces
        if hist is not None and hist.n_pairs:
            objective_grid = objective_grid + grid_residuals(problem, thetas, hist)
        best = int(np.argmin(objective_grid))
        if np.isfinite(objective_grid[best]):
            starts.append(("grid", thetas[best].copy()))

    candidates: list[tuple[str, np.ndarray, float]] = []
    iterations = 0
    for name, theta0 in starts:
        obj0 = evaluator(theta0)
        candidates.append((name, theta0, obj0))
        if not np.isfinite(obj0):
            continue
        theta, obj, nit = _nm_polish(evaluator, theta0, options, problem)
        iterations += nit
        candidates.append((f"{name}+nm", theta, obj))
    return _finish(problem, candidates, len(starts), iterations, evaluator.n_evals)


def polish_minimize(
    problem: ParameterProblem,
    bias_k: float,
    hist: History | None,
    warm_start: np.ndarray,
    options: SolverOptions = SolverOptions(),
    extra_starts: list[tuple[str, np.ndarray]] | None = None,
    warm_value: float | None = None,
    x_warm: np.ndarray | None = None,
    rel_step: float | None = 2e-3,
) -> LocalEstimate:
    """Cheap refinement tier: Nelder-Mead from the best of a few anchors.

    Used between full multi-start solves; the result still never falls below
    the supplied starts under the current objective.  ``warm_value`` lets the
    caller supply the warm start's objective when its trace term is already
    known, and ``x_warm`` seeds the Riccati iterations.
    """
    evaluator = _Evaluator(problem, bias_k, hist, x_warm=x_warm)
    warm = problem.clamp(warm_start)
    candidates: list[tuple[str, np.ndarray, float]] = [
        ("warm", warm, evaluator(warm) if warm_value is None else warm_value)
    ]
    n_starts = 1
    if extra_starts:
        for name, th in extra_starts:
            candidates.append((name, th, evaluator(th)))
            n_starts += 1
    finite = [c for c in candidates if np.isfinite(c[2])]
    iterations = 0
    if finite:
        name, theta0, _ = min(finite, key=lambda c: c[2])
        theta, obj, iterations = _nm_polish(
            evaluator, theta0, options, problem, rel_step=rel_step
        )
        candidates.append((f"{name}+nm", theta, obj))
    return _finish(problem, candidates, n_starts, iterations, evaluator.n_evals)
