"""Dense linear-algebra kernels for discrete-time LQR design.

Conventions used throughout the package:

* the Riccati solution ``X`` solves
  ``X = A'XA - A'XB (B'XB + R)^{-1} B'XA + Q``,
* the optimal gain is ``L = -(B'XB + R)^{-1} B'XA`` so the closed loop
  is ``A + B L``,
* matrix norms are spectral (2-) norms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import get_lapack_funcs

from .errors import (
    DimensionMismatch,
    NonConvergence,
    NotDetectable,
    NotSquare,
    NotStabilizable,
    SingularR,
)

_lapack_gesv = get_lapack_funcs("gesv", (np.empty((1, 1)),))

# Eigenvalues within this distance of the unit circle are treated as
# boundary modes by the PBH tests.
_CIRCLE_TOL = 1e-10
_RANK_TOL = 1e-8

DEFAULT_DARE_TOL = 1e-11
DEFAULT_DARE_MAX_ITER = 100_000


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting non-finite entries."""
    arr = np.asarray(m, dtype=float)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def spectral_norm(m) -> float:
    """Largest singular value."""
    arr = np.atleast_2d(np.asarray(m, dtype=float))
    if arr.size == 0:
        return 0.0
    return float(np.linalg.svd(arr, compute_uv=False)[0])


def spectral_radius(m) -> float:
    """Largest eigenvalue magnitude of a square matrix."""
    arr = as_matrix(m, "m")
    if arr.shape[0] != arr.shape[1]:
        raise NotSquare(f"spectral radius needs a square matrix, got {arr.shape}")
    return float(np.max(np.abs(np.linalg.eigvals(arr))))


def sym_sqrt_psd(q) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Small negative eigenvalues from roundoff are clipped to zero.
    """
    arr = as_matrix(q, "q")
    if arr.shape[0] != arr.shape[1]:
        raise NotSquare(f"matrix square root needs a square matrix, got {arr.shape}")
    w, v = np.linalg.eigh(0.5 * (arr + arr.T))
    if np.min(w) < -1e-8 * max(1.0, float(np.max(np.abs(w)))):
        raise ValueError("matrix is not positive semidefinite")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


@dataclass(frozen=True)
class StabDetectFlags:
    stabilizable: bool
    detectable: bool

    def __bool__(self) -> bool:
        return self.stabilizable and self.detectable


def _pbh_full_rank(a: np.ndarray, wide: np.ndarray, lam: complex) -> bool:
    n = a.shape[0]
    pencil = np.hstack([a - lam * np.eye(n), wide]).astype(complex)
    sv = np.linalg.svd(pencil, compute_uv=False)
    return bool(sv[-1] > _RANK_TOL * max(1.0, sv[0]))


def stab_detect_check(a, b, q) -> StabDetectFlags:
    """Numeric PBH tests for stabilizability of (A, B) and detectability of (A, Q^{1/2}).

    For every eigenvalue of A on or outside the unit circle the pencil
    ``[A - lam*I, B]`` must have full row rank (stabilizable); the dual test
    with ``Q^{1/2}`` replacing B gives detectability.
    """
    a = as_matrix(a, "a")
    if a.shape[0] != a.shape[1]:
        raise NotSquare(f"a must be square, got {a.shape}")
    b = as_matrix(b, "b")
    if b.shape[0] != a.shape[0]:
        raise DimensionMismatch(f"b must have {a.shape[0]} rows, got {b.shape[0]}")
    qh = sym_sqrt_psd(q)

    stab = True
    detect = True
    for lam in np.linalg.eigvals(a):
        if abs(lam) < 1.0 - _CIRCLE_TOL:
            continue
        if stab and not _pbh_full_rank(a, b, lam):
            stab = False
        if detect and not _pbh_full_rank(a.T, qh, np.conj(lam)):
            detect = False
        if not stab and not detect:
            break
    return StabDetectFlags(stabilizable=stab, detectable=detect)


@dataclass(frozen=True)
class DareSolution:
    """Converged Riccati solution and its gain.

    ``x`` is the n-by-n solution, ``gain`` the m-by-n feedback matrix,
    ``residual`` the spectral norm of the fixed-point defect of ``x``.
    """

    x: np.ndarray
    gain: np.ndarray
    iterations: int
    residual: float


def _check_r(r: np.ndarray) -> None:
    if not np.allclose(r, r.T, atol=1e-12):
        raise SingularR("r must be symmetric")
    try:
        np.linalg.cholesky(r)
    except np.linalg.LinAlgError as exc:
        raise SingularR("r must be positive definite") from exc


def _dare_iterate(
    a: np.ndarray,
    b: np.ndarray,
    q: np.ndarray,
    r: np.ndarray,
    tol: float,
    max_iter: int,
    x0: np.ndarray | None,
) -> tuple[np.ndarray, int, bool]:
    """Fixed-point iteration for the DARE starting from Q (or ``x0``).

    Returns (X, iterations, converged).  Divergence (non-finite or huge
    iterates) is reported as non-convergence with ``iterations`` spent so far.
    Uses LAPACK gesv and max-abs convergence checks directly: this runs
    millions of times inside estimation loops.
    """
    x = q.copy() if x0 is None else 0.5 * (x0 + x0.T)
    at = np.ascontiguousarray(a.T)
    bt = np.ascontiguousarray(b.T)
    gesv = _lapack_gesv
    for it in range(1, max_iter + 1):
        xa = x @ a
        xb = x @ b
        g = bt @ xb
        g += r
        _, _, k, info = gesv(g, bt @ xa, overwrite_a=True, overwrite_b=True)
        if info != 0:
            return x, it, False
        xn = at @ xa - (at @ xb) @ k + q
        xn += xn.T
        xn *= 0.5
        d = xn - x
        np.abs(d, out=d)
        step = d.max()
        np.abs(xn, out=d)
        scale = d.max()
        # NaNs fail both comparisons, so they land in the divergence branch
        if step <= tol * (scale if scale > 1.0 else 1.0):
            return xn, it, True
        if not scale < 1e14:
            return xn, it, False
        x = xn
    return x, max_iter, False


def _dare_map(x: np.ndarray, a: np.ndarray, b: np.ndarray, q: np.ndarray, r: np.ndarray) -> np.ndarray:
    xa = x @ a
    xb = x @ b
    k = np.linalg.solve(b.T @ xb + r, b.T @ xa)
    return a.T @ xa - (a.T @ xb) @ k + q


def solve_dare(
    a,
    b,
    q,
    r,
    tol: float = DEFAULT_DARE_TOL,
    max_iter: int = DEFAULT_DARE_MAX_ITER,
    x0: np.ndarray | None = None,
    check: bool = True,
) -> DareSolution:
    """Solve the discrete algebraic Riccati equation by fixed-point iteration.

    Iterates ``X <- A'XA - A'XB (B'XB+R)^{-1} B'XA + Q`` from ``X0 = Q``
    until the relative step falls below ``tol``.  ``x0`` warm-starts the
    iteration (the fixed point does not depend on it).

    With ``check=True`` the stabilizability/detectability preconditions are
    verified up front and violations raise; with ``check=False`` divergence
    of the iteration is the only failure signal (used in hot loops where the
    caller treats failures as infeasible points).
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    q = as_matrix(q, "q")
    r = as_matrix(r, "r")
    n = a.shape[0]
    if a.shape != (n, n):
        raise NotSquare(f"a must be square, got {a.shape}")
    m = b.shape[1]
    if b.shape != (n, m):
        raise DimensionMismatch(f"b must be {n}x{m}, got {b.shape}")
    if q.shape != (n, n) or r.shape != (m, m):
        raise DimensionMismatch("q must be n x n and r must be m x m")
    _check_r(r)
    if check:
        flags = stab_detect_check(a, b, q)
        if not flags.stabilizable:
            raise NotStabilizable("(a, b) is not numerically stabilizable")
        if not flags.detectable:
            raise NotDetectable("(a, q^{1/2}) is not numerically detectable")

    x, iters, converged = _dare_iterate(a, b, q, r, tol, max_iter, x0)
    if not converged:
        raise NonConvergence(
            f"DARE fixed-point iteration did not converge in {iters} iterations"
        )
    residual = spectral_norm(x - _dare_map(x, a, b, q, r))
    gain = -np.linalg.solve(b.T @ x @ b + r, b.T @ x @ a)
    return DareSolution(x=x, gain=gain, iterations=iters, residual=residual)


def lqr_gain(a, b, q, r, tol: float = DEFAULT_DARE_TOL, max_iter: int = DEFAULT_DARE_MAX_ITER) -> np.ndarray:
    """The optimal feedback gain ``-(B'XB+R)^{-1} B'XA``."""
    return solve_dare(a, b, q, r, tol=tol, max_iter=max_iter).gain


def dare_trace(
    a: np.ndarray,
    b: np.ndarray,
    q: np.ndarray,
    r: np.ndarray,
    tol: float = DEFAULT_DARE_TOL,
    max_iter: int = DEFAULT_DARE_MAX_ITER,
    x0: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Trace of the Riccati solution plus the solution itself, no validation.

    Hot-loop variant of :func:`solve_dare`: inputs are trusted arrays,
    failures surface as ``NonConvergence``.  The returned X is reusable as a
    warm start for nearby problems.
    """
    x, _, converged = _dare_iterate(a, b, q, r, tol, max_iter, x0)
    if not converged:
        raise NonConvergence("DARE iteration diverged or stalled")
    return float(np.trace(x)), x


def dare_trace_batch(
    a_s: np.ndarray,
    b_s: np.ndarray,
    q: np.ndarray,
    r: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 20_000,
) -> np.ndarray:
    """Riccati solution traces for a stack of (A, B) pairs sharing Q and R.

    ``a_s`` is (G, n, n) and ``b_s`` is (G, n, m).  Entries that diverge or
    fail to converge get ``inf``.  Used to scan parameter grids cheaply.
    """
    g_count, n, _ = a_s.shape
    x = np.broadcast_to(q, (g_count, n, n)).copy()
    at = np.swapaxes(a_s, 1, 2)
    bt = np.swapaxes(b_s, 1, 2)
    alive = np.ones(g_count, dtype=bool)
    converged = np.zeros(g_count, dtype=bool)
    for _ in range(max_iter):
        if not alive.any():
            break
        xa = x @ a_s
        xb = x @ b_s
        gmat = bt @ xb + r
        try:
            k = np.linalg.solve(gmat, bt @ xa)
        except np.linalg.LinAlgError:
            # Rare: a singular grid point poisons the batch solve; fall back
            # to marking every unconverged entry infeasible one by one.
            for i in np.flatnonzero(alive):
                try:
                    np.linalg.solve(gmat[i], bt[i] @ xa[i])
                except np.linalg.LinAlgError:
                    alive[i] = False
            continue
        xn = at @ xa - (at @ xb) @ k + q
        xn = 0.5 * (xn + np.swapaxes(xn, 1, 2))
        bad = ~np.isfinite(xn).all(axis=(1, 2)) | (np.abs(xn).max(axis=(1, 2)) > 1e14)
        diff = np.linalg.norm(xn - x, axis=(1, 2))
        scale = np.maximum(1.0, np.linalg.norm(xn, axis=(1, 2)))
        x = np.where(bad[:, None, None], x, xn)
        done = alive & ~bad & (diff <= tol * scale)
        converged |= done
        alive &= ~bad & ~done
    traces = np.einsum("gii->g", x)
    traces[~converged] = np.inf
    return traces


def quad_form_diff_bound(x, p, y) -> tuple[float, float]:
    """Norm bound for the difference of two congruent quadratic forms.

    Returns ``(lhs, rhs)`` with ``lhs = |X'PX - Y'PY|`` and
    ``rhs = |P| |X-Y| (|X| + |Y|)`` in spectral norm; ``lhs <= rhs`` always.
    """
    x = as_matrix(x, "x")
    p = as_matrix(p, "p")
    y = as_matrix(y, "y")
    if not (x.shape == p.shape == y.shape) or x.shape[0] != x.shape[1]:
        raise DimensionMismatch("x, p, y must be square matrices of equal size")
    lhs = spectral_norm(x.T @ p @ x - y.T @ p @ y)
    rhs = spectral_norm(p) * spectral_norm(x - y) * (spectral_norm(x) + spectral_norm(y))
    return lhs, rhs
