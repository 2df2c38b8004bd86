"""Seeded stochastic closed-loop simulation and its cost accounting.

The loop is the exact recursion ``x(k+1) = A x(k) + B u(k) + w(k)`` from
``x(0) = 0`` with i.i.d. standard-normal noise.  Traces record the running
quadratic cost, the gap between the applied gain and the optimal one,
per-parameter estimation errors, a running fourth-moment average, and
cumulative counts of threshold crossings used by the convergence checks.

Everything is bit-reproducible given (plant, strategy, config): noise comes
from a counter-based generator keyed by (seed, trajectory), so independent
trajectories can run in parallel without affecting each other's draws.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .controllers import MismatchThresholds
from .errors import DimensionMismatch, UnstableClosedLoop
from .matlin import solve_dare, spectral_norm, spectral_radius
from .plantspace import NoiseModel, PlantInstance, whiten

_NOISE_STREAM_TAG = 0x0B0C


class GaussianStream:
    """Standard-normal noise via Box-Muller on a counter-based generator.

    Each (seed, trajectory) pair owns an independent stream.  A fixed number
    of uniforms is consumed per step (two per normal pair, spares discarded)
    so draw positions are a pure function of (step, component).
    """

    def __init__(self, seed: int, trajectory: int = 0):
        ss = np.random.SeedSequence(
            [int(seed) & 0xFFFFFFFFFFFFFFFF, int(trajectory), _NOISE_STREAM_TAG]
        )
        self._rng = np.random.Generator(np.random.Philox(ss))

    def normals(self, steps: int, dim: int) -> np.ndarray:
        pairs = (dim + 1) // 2
        u = self._rng.random((steps, 2 * pairs))
        u1 = 1.0 - u[:, 0::2]  # (0, 1]: keeps log() finite
        u2 = u[:, 1::2]
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z = np.empty((steps, 2 * pairs))
        z[:, 0::2] = radius * np.cos(angle)
        z[:, 1::2] = radius * np.sin(angle)
        return z[:, :dim]


@dataclass(frozen=True)
class SimConfig:
    """How to run one closed-loop trajectory."""

    horizon: int
    seed: int
    noise: NoiseModel = NoiseModel()
    record_stride: int = 50
    thresholds: MismatchThresholds = MismatchThresholds()
    noise_scale: float = 1.0  # test hook; 0 silences the noise entirely
    overflow_limit: float = 1e12
    trajectory_index: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.record_stride < 1:
            raise ValueError("record_stride must be >= 1")


@dataclass
class SimTrace:
    """Recorded series plus end-of-run summary scalars.

    Series are sampled every ``record_stride`` steps (plus the final step);
    ``steps[i]`` is the number of completed steps T' at sample i, and
    cumulative columns cover k < T'.  ``occ_gain``/``occ_mismatch`` count
    steps where a unit's gain error exceeded rho, resp. where its estimate's
    closed-loop mismatch reached delta.
    """

    strategy: str
    seed: int
    horizon: int
    record_stride: int
    plant_summary: str
    estimate_labels: tuple[str, ...]
    steps: np.ndarray
    cost_sum: np.ndarray
    running_cost: np.ndarray
    gain_error: np.ndarray
    moment4_avg: np.ndarray
    estimate_errors: np.ndarray  # (n_labels, n_records)
    occ_gain: np.ndarray  # (n_units, n_records), cumulative
    occ_mismatch: np.ndarray
    final_cost: float
    tail_cost: float
    failed: bool = False
    fail_step: int | None = None
    thresholds: MismatchThresholds = field(default_factory=MismatchThresholds)

    @property
    def n_units(self) -> int:
        return self.occ_gain.shape[0]

    def window_cost(self, start: int, stop: int) -> float:
        """Exact mean cost over steps [start, stop); bounds must be recorded."""
        steps = self.steps.tolist()
        try:
            i0 = steps.index(start) if start > 0 else -1
            i1 = steps.index(stop)
        except ValueError as exc:
            raise ValueError(f"window [{start}, {stop}) not on the record grid") from exc
        lo = 0.0 if i0 < 0 else self.cost_sum[i0]
        return (self.cost_sum[i1] - lo) / (stop - start)

    def occ_gain_at(self, step: int, unit: int) -> int:
        idx = self.steps.tolist().index(step)
        return int(self.occ_gain[unit, idx])


def run_closed_loop(plant: PlantInstance, strategy, cfg: SimConfig) -> SimTrace:
    """Simulate one trajectory of the plant under the strategy's controller."""
    if not cfg.noise.is_unit():
        plant = whiten(plant, cfg.noise)
    a, b, q, r = plant.a, plant.b, plant.q, plant.r
    n, m = plant.n, plant.m
    horizon = cfg.horizon

    gain_opt = solve_dare(a, b, q, r, check=False).gain
    noise = GaussianStream(cfg.seed, cfg.trajectory_index).normals(horizon, n)
    if cfg.noise_scale != 1.0:
        noise = noise * cfg.noise_scale
    controller = strategy.make_controller(plant, cfg.seed)
    labels = controller.estimate_labels
    n_units = len(controller.unit_gains)
    rho = cfg.thresholds.rho
    delta = cfg.thresholds.delta

    rec_steps = list(range(cfg.record_stride, horizon + 1, cfg.record_stride))
    if not rec_steps or rec_steps[-1] != horizon:
        rec_steps.append(horizon)
    n_rec = len(rec_steps)
    steps_arr = np.array(rec_steps)
    cost_rec = np.zeros(n_rec)
    gain_err_rec = np.zeros(n_rec)
    mom_rec = np.zeros(n_rec)
    est_rec = np.zeros((len(labels), n_rec))
    occ_gain = np.zeros((n_units, n_rec), dtype=np.int64)
    occ_mis = np.zeros((n_units, n_rec), dtype=np.int64)

    x = np.zeros(n)
    cost_sum = 0.0
    tail_sum = 0.0
    tail_start = horizon // 2
    mom_sum = 0.0
    occ_gain_cum = np.zeros(n_units, dtype=np.int64)
    occ_mis_cum = np.zeros(n_units, dtype=np.int64)
    # cached per controller revision: norms only change when a gain does
    seen_revision = -1
    gain_error = 0.0
    unit_exceed = np.zeros(n_units, dtype=bool)
    unit_mismatch_hit = np.zeros(n_units, dtype=bool)
    failed = False
    fail_step = None
    rec_i = 0
    limit = cfg.overflow_limit

    for k in range(horizon):
        u = controller.act(k, x)
        if controller.revision != seen_revision:
            seen_revision = controller.revision
            gain_error = spectral_norm(controller.applied_gain - gain_opt)
            for i, g in enumerate(controller.unit_gains):
                unit_exceed[i] = spectral_norm(g - gain_opt) > rho
            for i, mis in enumerate(controller.unit_mismatches):
                unit_mismatch_hit[i] = mis >= delta
        if k == tail_start:
            tail_sum = cost_sum  # cost accumulated strictly before the tail window
        cost_sum += float(x @ q @ x + u @ r @ u)
        xx = float(x @ x)
        uu = float(u @ u)
        mom_sum += xx * xx + uu * uu
        occ_gain_cum += unit_exceed
        occ_mis_cum += unit_mismatch_hit
        x = a @ x + b @ u + noise[k]
        if np.abs(x).max() > limit:
            failed = True
            fail_step = k + 1
            break
        if k + 1 == rec_steps[rec_i]:
            t_prime = k + 1
            cost_rec[rec_i] = cost_sum
            gain_err_rec[rec_i] = gain_error
            mom_rec[rec_i] = mom_sum / t_prime
            if labels:
                est_rec[:, rec_i] = controller.estimate_errors()
            occ_gain[:, rec_i] = occ_gain_cum
            occ_mis[:, rec_i] = occ_mis_cum
            rec_i += 1

    if failed:
        steps_arr = steps_arr[:rec_i]
        cost_rec = cost_rec[:rec_i]
        gain_err_rec = gain_err_rec[:rec_i]
        mom_rec = mom_rec[:rec_i]
        est_rec = est_rec[:, :rec_i]
        occ_gain = occ_gain[:, :rec_i]
        occ_mis = occ_mis[:, :rec_i]
        done = fail_step
    else:
        done = horizon
    final_cost = cost_sum / done
    tail_len = done - tail_start
    tail_cost = (cost_sum - tail_sum) / tail_len if tail_len > 0 else final_cost

    return SimTrace(
        strategy=strategy.name,
        seed=cfg.seed,
        horizon=horizon,
        record_stride=cfg.record_stride,
        plant_summary=plant.describe(),
        estimate_labels=labels,
        steps=steps_arr,
        cost_sum=cost_rec,
        running_cost=cost_rec / np.maximum(steps_arr, 1),
        gain_error=gain_err_rec,
        moment4_avg=mom_rec,
        estimate_errors=est_rec,
        occ_gain=occ_gain,
        occ_mismatch=occ_mis,
        final_cost=final_cost,
        tail_cost=tail_cost,
        failed=failed,
        fail_step=fail_step,
        thresholds=cfg.thresholds,
    )


# ---------------------------------------------------------------------------
# analytic cost of a static gain


def lyapunov_cost(plant: PlantInstance, static_gain: np.ndarray, tol: float = 1e-12,
                  max_iter: int = 200_000) -> float:
    """Ergodic cost of a constant gain via the closed-loop Lyapunov equation.

    Solves ``S = (A+BK) S (A+BK)' + I`` by fixed-point iteration and returns
    ``trace(S (Q + K'RK))``.  Requires a stable closed loop.
    """
    gain = np.asarray(static_gain, dtype=float)
    if gain.shape != (plant.m, plant.n):
        raise DimensionMismatch(f"gain must be {plant.m} x {plant.n}")
    closed = plant.a + plant.b @ gain
    if spectral_radius(closed) >= 1.0:
        raise UnstableClosedLoop("static gain does not stabilize the plant")
    s = np.eye(plant.n)
    ct = closed.T
    for _ in range(max_iter):
        s_next = closed @ s @ ct + np.eye(plant.n)
        if np.abs(s_next - s).max() <= tol * max(1.0, np.abs(s_next).max()):
            s = s_next
            break
        s = s_next
    weight = plant.q + gain.T @ plant.r @ gain
    return float(np.trace(s @ weight))


@dataclass(frozen=True)
class MomentReport:
    sup_moment4: float
    bound: float | None
    within_bound: bool | None


def moment_tracker(trace: SimTrace, bound: float | None = None) -> MomentReport:
    """Supremum of the running fourth-moment average over the recorded grid."""
    sup = float(np.max(trace.moment4_avg)) if trace.moment4_avg.size else 0.0
    within = None if bound is None else bool(sup <= bound)
    return MomentReport(sup_moment4=sup, bound=bound, within_bound=within)


# ---------------------------------------------------------------------------
# CSV serialization


def trace_to_csv(trace: SimTrace, path: str | Path | None = None) -> str:
    """Write a trace as CSV with '#'-prefixed metadata lines; returns the text."""
    buf = io.StringIO()
    meta = {
        "strategy": trace.strategy,
        "seed": trace.seed,
        "horizon": trace.horizon,
        "record_stride": trace.record_stride,
        "plant": trace.plant_summary,
        "rho": trace.thresholds.rho,
        "delta": trace.thresholds.delta,
        "final_cost": repr(trace.final_cost),
        "tail_cost": repr(trace.tail_cost),
        "failed": int(trace.failed),
        "fail_step": "" if trace.fail_step is None else trace.fail_step,
    }
    for key, val in meta.items():
        buf.write(f"# {key}={val}\n")
    writer = csv.writer(buf, lineterminator="\n")
    header = ["k", "cost_sum", "running_cost", "gain_error", "moment4"]
    header += [f"err:{lab}" for lab in trace.estimate_labels]
    header += [f"occ_gain:{i}" for i in range(trace.n_units)]
    header += [f"occ_mismatch:{i}" for i in range(trace.n_units)]
    writer.writerow(header)
    for i, t_prime in enumerate(trace.steps):
        row = [
            int(t_prime),
            repr(float(trace.cost_sum[i])),
            repr(float(trace.running_cost[i])),
            repr(float(trace.gain_error[i])),
            repr(float(trace.moment4_avg[i])),
        ]
        row += [repr(float(v)) for v in trace.estimate_errors[:, i]]
        row += [int(v) for v in trace.occ_gain[:, i]]
        row += [int(v) for v in trace.occ_mismatch[:, i]]
        writer.writerow(row)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def trace_from_csv(path: str | Path) -> SimTrace:
    """Rebuild a trace from its CSV form (inverse of :func:`trace_to_csv`)."""
    lines = Path(path).read_text().splitlines()
    meta: dict[str, str] = {}
    data_lines = []
    for line in lines:
        if line.startswith("# "):
            key, _, val = line[2:].partition("=")
            meta[key] = val
        elif line:
            data_lines.append(line)
    reader = csv.reader(data_lines)
    header = next(reader)
    rows = [row for row in reader]
    cols = {name: i for i, name in enumerate(header)}
    labels = tuple(h[4:] for h in header if h.startswith("err:"))
    n_units = sum(1 for h in header if h.startswith("occ_gain:"))
    steps = np.array([int(row[cols["k"]]) for row in rows])
    picked = lambda name: np.array([float(row[cols[name]]) for row in rows])
    est = np.array(
        [[float(row[cols[f"err:{lab}"]]) for row in rows] for lab in labels]
    ).reshape(len(labels), len(rows))
    occ_g = np.array(
        [[int(row[cols[f"occ_gain:{i}"]]) for row in rows] for i in range(n_units)],
        dtype=np.int64,
    ).reshape(n_units, len(rows))
    occ_m = np.array(
        [[int(row[cols[f"occ_mismatch:{i}"]]) for row in rows] for i in range(n_units)],
        dtype=np.int64,
    ).reshape(n_units, len(rows))
    return SimTrace(
        strategy=meta["strategy"],
        seed=int(meta["seed"]),
        horizon=int(meta["horizon"]),
        record_stride=int(meta["record_stride"]),
        plant_summary=meta["plant"],
        estimate_labels=labels,
        steps=steps,
        cost_sum=picked("cost_sum"),
        running_cost=picked("running_cost"),
        gain_error=picked("gain_error"),
        moment4_avg=picked("moment4"),
        estimate_errors=est,
        occ_gain=occ_g,
        occ_mismatch=occ_m,
        final_cost=float(meta["final_cost"]),
        tail_cost=float(meta["tail_cost"]),
        failed=bool(int(meta["failed"])),
        fail_step=None if meta["fail_step"] == "" else int(meta["fail_step"]),
        thresholds=MismatchThresholds(
            delta=float(meta["delta"]), rho=float(meta["rho"])
        ),
    )


# ---------------------------------------------------------------------------
# parallel batch running


def _run_task(args):
    plant, strategy, cfg = args
    return run_closed_loop(plant, strategy, cfg)


def run_batch(tasks, max_workers: int | None = None, parallel: bool = True):
    """Run (plant, strategy, cfg) tasks, in parallel when it pays off.

    Results come back in task order regardless of scheduling, so batch runs
    are as reproducible as sequential ones.
    """
    tasks = list(tasks)
    if not parallel or len(tasks) <= 1:
        return [_run_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(_run_task, tasks, chunksize=1))
