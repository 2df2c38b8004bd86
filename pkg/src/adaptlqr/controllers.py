"""Control design strategies and their runtime controllers.

Four designs are provided:

* ``OptimalFullInfo``      -- the optimal gain L(A, B) computed from the
  true plant (the benchmark everyone is measured against),
* ``DecentralizedCostBiased`` -- each subcontroller estimates the blocks it
  does not know (per the design graph) by cost-biased ML and applies its own
  row block of the certainty-equivalence gain,
* ``CentralizedCostBiased``   -- one shared estimator that ignores the
  locally available model knowledge and searches the whole family box,
* ``DeadbeatPlatoon``      -- the static nilpotent design for the platoon
  family, a classic limited-model-information baseline.

Estimates refresh on the update cadence (every second step by default).
Solving the full multi-start problem at every update step is wasteful once
the posterior has settled, so units run a tiered schedule: full multi-start
solves on a geometric grid of steps, cheap warm-started refinements during
warm-up and on a denser geometric grid, and plain carry-over otherwise.
Every refresh is still monotone against carrying the previous estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonConvergence, WrongFamily
from .estimator import (
    BiasSchedule,
    History,
    LocalEstimate,
    ParameterProblem,
    SolverOptions,
    centralized_problem,
    cbml_minimize,
    grid_points,
    grid_residuals,
    grid_traces,
    polish_minimize,
    problem_for_subsystem,
    pure_ls_start,
)
from .matlin import dare_trace, solve_dare, spectral_norm
from .plantspace import InfoStructure, PlantFamily, PlantInstance


@dataclass(frozen=True)
class MismatchThresholds:
    """Thresholds for the convergence occurrence counters.

    ``delta`` triggers the closed-loop model-mismatch counter; ``rho``
    triggers the gain-error counter.
    """

    delta: float = 0.1
    rho: float = 0.1

    def __post_init__(self):
        if self.delta <= 0 or self.rho <= 0:
            raise ValueError("thresholds must be positive")


def subsystem_rows(gain: np.ndarray, subsystem: int, info: InfoStructure) -> np.ndarray:
    """Row block of a full m-by-n gain belonging to one subsystem's actuators."""
    gain = np.asarray(gain, dtype=float)
    if gain.shape != (info.m, info.n):
        raise ValueError(f"gain must be {info.m} x {info.n}, got {gain.shape}")
    if not 0 <= subsystem < info.n_subsystems:
        raise IndexError(f"subsystem {subsystem} out of range")
    return gain[info.input_slice(subsystem), :]


def stack_gain_blocks(blocks: list[np.ndarray]) -> np.ndarray:
    return np.vstack(blocks)


def optimal_full_info(plant: PlantInstance) -> np.ndarray:
    """The optimal full-information gain L(A, B)."""
    return solve_dare(plant.a, plant.b, plant.q, plant.r, check=False).gain


def deadbeat_platoon(plant: PlantInstance) -> np.ndarray:
    """Static deadbeat gain for the two-vehicle platoon family.

    The closed loop is nilpotent of index 2, so the deterministic state dies
    in two steps regardless of the parameter values.
    """
    info = plant.info
    if (
        info.state_dims != (1, 2)
        or info.input_dims != (1, 1)
        or not np.array_equal(info.plant_adj, [[1, 0], [1, 1]])
        or not np.allclose(plant.a[1, :], [1.0, 1.0, -1.0])
        or plant.b[0, 0] == 0.0
        or plant.b[2, 1] == 0.0
        or np.any(plant.b[1, :] != 0.0)
    ):
        raise WrongFamily("deadbeat gain is defined for the platoon family only")
    a11, a22 = plant.a[0, 0], plant.a[2, 2]
    b11, b22 = plant.b[0, 0], plant.b[2, 1]
    return np.array(
        [
            [-a11 / b11, 0.0, 0.0],
            [1.0 / b22, 1.0 / b22, -(1.0 + a22) / b22],
        ]
    )


def closed_loop_mismatch(
    plant: PlantInstance,
    a_hat: np.ndarray,
    b_hat: np.ndarray,
    gain_hat: np.ndarray | None = None,
) -> float:
    """Spectral-norm gap between the true and estimated closed loops.

    Both loops use the gain designed for the estimate, so the gap is
    ``|(A + B L_hat) - (A_hat + B_hat L_hat)|``.  An estimate can be far from
    the truth and still have zero mismatch; such estimates are exactly the
    ones certainty equivalence cannot distinguish from the truth.
    """
    if gain_hat is None:
        gain_hat = solve_dare(a_hat, b_hat, plant.q, plant.r, check=False).gain
    diff = (plant.a + plant.b @ gain_hat) - (a_hat + b_hat @ gain_hat)
    return spectral_norm(diff)


def mismatch_at_least(
    plant: PlantInstance,
    a_hat: np.ndarray,
    b_hat: np.ndarray,
    thresholds: MismatchThresholds,
    gain_hat: np.ndarray | None = None,
) -> bool:
    """Whether the estimate's closed-loop mismatch reaches ``delta``."""
    return closed_loop_mismatch(plant, a_hat, b_hat, gain_hat) >= thresholds.delta


# ---------------------------------------------------------------------------
# static controllers


class StaticGainController:
    """Wraps a constant gain in the runtime controller interface."""

    def __init__(self, gain: np.ndarray, info: InfoStructure):
        self.gain = np.asarray(gain, dtype=float)
        self.info = info
        self.revision = 0

    def act(self, k: int, x: np.ndarray) -> np.ndarray:
        return self.gain @ x

    @property
    def applied_gain(self) -> np.ndarray:
        return self.gain

    @property
    def unit_gains(self) -> list[np.ndarray]:
        return []

    @property
    def unit_mismatches(self) -> list[float]:
        return []

    def estimate_errors(self) -> np.ndarray:
        return np.empty(0)

    @property
    def estimate_labels(self) -> tuple[str, ...]:
        return ()


# ---------------------------------------------------------------------------
# adaptive controller


@dataclass(frozen=True)
class AdaptiveOptions:
    """Cadence and effort policy for the adaptive estimators.

    ``update_period`` is the estimate refresh cadence in steps (2 keeps the
    classic every-other-step rule).  Refreshes up to ``warmup_horizon`` run a
    warm-started refinement every time; past it, refinement steps thin out
    geometrically by ``polish_growth`` and full multi-start solves by
    ``full_growth``.  Growth factors of 1 disable the thinning entirely.
    ``polish_solver`` trades accuracy for speed on the refinement tier; full
    solves always use ``solver``.
    """

    update_period: int = 2
    warmup_horizon: int = 200
    polish_growth: float = 1.06
    full_growth: float = 2.5
    first_full_step: int = 2
    solver: SolverOptions = SolverOptions()
    polish_solver: SolverOptions = SolverOptions(nm_max_iter=200, xatol=1e-7)
    polish_rel_step: float = 2e-3
    # refinement is skipped when the LS anchor sits this close to the warm
    # estimate (relative to box width) and the grid scan finds nothing better
    skip_rel_tol: float = 2e-4

    def __post_init__(self):
        if self.update_period < 1:
            raise ValueError("update_period must be >= 1")
        if self.polish_growth < 1.0 or self.full_growth < 1.0:
            raise ValueError("growth factors must be >= 1")


class _EstimatorUnit:
    """One estimation problem plus its schedule state and current gain."""

    def __init__(
        self,
        index: int,
        problem: ParameterProblem,
        plant: PlantInstance,
        options: AdaptiveOptions,
        master_seed: int,
    ):
        self.index = index
        self.problem = problem
        self.plant = plant
        self.options = options
        self.master_seed = master_seed
        theta0 = problem.midpoint()
        a0, b0 = problem.split(theta0)
        self.estimate = LocalEstimate(
            a_hat=a0, b_hat=b0, theta=theta0, objective=np.inf, report=None
        )
        self.x_warm: np.ndarray | None = None
        self.trace_hat = 0.0
        self.gain = self._gain_for(a0, b0)
        self.mismatch = closed_loop_mismatch(plant, a0, b0, self.gain)
        self.next_full = options.first_full_step
        self.next_polish = options.update_period
        self.grid_cache: tuple[np.ndarray, np.ndarray] | None = None
        if 0 < problem.dim <= options.solver.grid_max_dim:
            thetas = grid_points(problem, options.solver.grid_axis_points)
            self.grid_cache = (thetas, grid_traces(problem, thetas))

    def _gain_for(self, a_hat: np.ndarray, b_hat: np.ndarray) -> np.ndarray:
        tr, x = dare_trace(a_hat, b_hat, self.problem.q, self.problem.r, x0=self.x_warm)
        self.x_warm = x
        self.trace_hat = tr
        return -np.linalg.solve(
            b_hat.T @ x @ b_hat + self.problem.r, b_hat.T @ x @ a_hat
        )

    def _schedule_after(self, k: int, full: bool) -> None:
        period = self.options.update_period
        self.next_polish = max(k + period, math.ceil(k * self.options.polish_growth))
        if full:
            self.next_full = max(k + period, math.ceil(k * self.options.full_growth))

    def maybe_update(self, k: int, hist: History, bias_k: float) -> bool:
        """Refresh the estimate if the schedule says so; True when it changed."""
        full = k >= self.next_full
        polish = k <= self.options.warmup_horizon or k >= self.next_polish
        if not (full or polish):
            return False
        prev = self.estimate
        try:
            if full:
                est = cbml_minimize(
                    self.problem,
                    bias_k,
                    hist,
                    warm_start=prev.theta,
                    rng_seed=_mix_seed(self.master_seed, self.index, k),
                    options=self.options.solver,
                    grid_trace_cache=self.grid_cache,
                    x_warm=self.x_warm,
                )
            else:
                # the warm start's trace term is cached, so its objective
                # costs one residual evaluation
                warm_value = bias_k * self.trace_hat + (
                    hist.residual_sum(np.hstack([prev.a_hat, prev.b_hat]))
                    if hist.n_pairs
                    else 0.0
                )
                extra = []
                grid_improves = False
                if self.grid_cache is not None:
                    thetas, traces = self.grid_cache
                    objective = bias_k * traces
                    if hist.n_pairs:
                        objective = objective + grid_residuals(self.problem, thetas, hist)
                    best = int(np.argmin(objective))
                    if np.isfinite(objective[best]):
                        extra.append(("grid", thetas[best].copy()))
                        grid_improves = objective[best] < warm_value - 1e-9
                ls = pure_ls_start(self.problem, hist) if hist.n_pairs else None
                if ls is not None:
                    widths = self.problem.hi - self.problem.lo
                    ls_close = bool(
                        np.all(np.abs(ls - prev.theta) <= self.options.skip_rel_tol * widths)
                    )
                    if ls_close and not grid_improves:
                        # data agrees with the current estimate; carry it over
                        self._schedule_after(k, full=False)
                        return False
                    extra.append(("least-squares", ls))
                est = polish_minimize(
                    self.problem,
                    bias_k,
                    hist,
                    warm_start=prev.theta,
                    options=self.options.polish_solver,
                    extra_starts=extra,
                    warm_value=warm_value,
                    x_warm=self.x_warm,
                    rel_step=self.options.polish_rel_step,
                )
            gain = self._gain_for(est.a_hat, est.b_hat)
        except NonConvergence:
            # estimate infeasible at runtime: keep the previous gain and
            # retry at the next update step
            self.next_polish = k + self.options.update_period
            return False
        self._schedule_after(k, full)
        changed = prev.theta.size == 0 or not np.array_equal(est.theta, prev.theta)
        self.estimate = est
        if changed:
            self.gain = gain
            self.mismatch = closed_loop_mismatch(
                self.plant, est.a_hat, est.b_hat, gain
            )
        return changed

    def errors(self) -> np.ndarray:
        return np.abs(self.estimate.theta - self.problem.truth)


def _mix_seed(master: int, unit: int, k: int) -> int:
    # stable 64-bit mixing for per-(unit, step) solver streams
    h = (master & 0xFFFFFFFFFFFFFFFF) * 0x9E3779B97F4A7C15
    h ^= (unit + 1) * 0xBF58476D1CE4E5B9
    h ^= (k + 1) * 0x94D049BB133111EB
    return h & 0xFFFFFFFFFFFFFFFF


class AdaptiveController:
    """Runtime state of the cost-biased adaptive design for one trajectory."""

    def __init__(
        self,
        plant: PlantInstance,
        family: PlantFamily,
        bias: BiasSchedule,
        options: AdaptiveOptions,
        seed: int,
        centralized: bool,
    ):
        self.plant = plant
        self.info = plant.info
        self.bias = bias
        self.options = options
        self.centralized = centralized
        self.hist = History(plant.n, plant.m)
        if centralized:
            problems = [centralized_problem(family, plant)]
        else:
            problems = [
                problem_for_subsystem(family, plant, i)
                for i in range(self.info.n_subsystems)
            ]
        self.units = [
            _EstimatorUnit(i, prob, plant, options, seed)
            for i, prob in enumerate(problems)
        ]
        self.revision = 0
        self._applied = self._stack()

    def _stack(self) -> np.ndarray:
        if self.centralized:
            return self.units[0].gain.copy()
        return stack_gain_blocks(
            [
                subsystem_rows(unit.gain, i, self.info)
                for i, unit in enumerate(self.units)
            ]
        )

    def act(self, k: int, x: np.ndarray) -> np.ndarray:
        self.hist.append_state(x)
        if k >= 2 and k % self.options.update_period == 0:
            bias_k = self.bias.weight(k)
            changed = False
            for unit in self.units:
                changed |= unit.maybe_update(k, self.hist, bias_k)
            if changed:
                self.revision += 1
                self._applied = self._stack()
        u = self._applied @ x
        self.hist.append_input(u)
        return u

    @property
    def applied_gain(self) -> np.ndarray:
        return self._applied

    @property
    def unit_gains(self) -> list[np.ndarray]:
        return [unit.gain for unit in self.units]

    @property
    def unit_mismatches(self) -> list[float]:
        return [unit.mismatch for unit in self.units]

    def estimate_errors(self) -> np.ndarray:
        if not self.units:
            return np.empty(0)
        return np.concatenate([unit.errors() for unit in self.units])

    @property
    def estimate_labels(self) -> tuple[str, ...]:
        labels = []
        for unit in self.units:
            prefix = "c" if self.centralized else f"s{unit.index}"
            labels.extend(f"{prefix}:{lab}" for lab in unit.problem.labels)
        return tuple(labels)


# ---------------------------------------------------------------------------
# strategy front ends (picklable descriptions of how to control a plant)


@dataclass(frozen=True)
class OptimalFullInfo:
    """Certainty about the true model: apply L(A, B) from step zero."""

    name: str = field(default="optimal", init=False)

    def make_controller(self, plant: PlantInstance, seed: int = 0) -> StaticGainController:
        return StaticGainController(optimal_full_info(plant), plant.info)


@dataclass(frozen=True)
class DeadbeatPlatoon:
    name: str = field(default="deadbeat", init=False)

    def make_controller(self, plant: PlantInstance, seed: int = 0) -> StaticGainController:
        return StaticGainController(deadbeat_platoon(plant), plant.info)


@dataclass(frozen=True)
class DecentralizedCostBiased:
    """Per-subsystem cost-biased ML estimation under the design graph."""

    family: PlantFamily
    bias: BiasSchedule = BiasSchedule()
    options: AdaptiveOptions = AdaptiveOptions()
    name: str = field(default="adaptive", init=False)

    def make_controller(self, plant: PlantInstance, seed: int = 0) -> AdaptiveController:
        return AdaptiveController(
            plant, self.family, self.bias, self.options, seed, centralized=False
        )


@dataclass(frozen=True)
class CentralizedCostBiased:
    """One global cost-biased ML estimator ignoring local model knowledge."""

    family: PlantFamily
    bias: BiasSchedule = BiasSchedule()
    options: AdaptiveOptions = AdaptiveOptions()
    name: str = field(default="centralized", init=False)

    def make_controller(self, plant: PlantInstance, seed: int = 0) -> AdaptiveController:
        return AdaptiveController(
            plant, self.family, self.bias, self.options, seed, centralized=True
        )


STRATEGY_NAMES = ("optimal", "adaptive", "centralized", "deadbeat")


def strategy_by_name(
    name: str,
    family: PlantFamily,
    bias: BiasSchedule = BiasSchedule(),
    options: AdaptiveOptions = AdaptiveOptions(),
):
    if name == "optimal":
        return OptimalFullInfo()
    if name == "adaptive":
        return DecentralizedCostBiased(family, bias, options)
    if name == "centralized":
        return CentralizedCostBiased(family, bias, options)
    if name == "deadbeat":
        return DeadbeatPlatoon()
    raise ValueError(f"unknown strategy {name!r}; expected one of {STRATEGY_NAMES}")
