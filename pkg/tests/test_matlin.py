import numpy as np
import pytest

from adaptlqr import (
    DimensionMismatch,
    NotSquare,
    NotStabilizable,
    SingularR,
    lqr_gain,
    quad_form_diff_bound,
    solve_dare,
    spectral_norm,
    spectral_radius,
    stab_detect_check,
    sym_sqrt_psd,
)
from adaptlqr.matlin import dare_trace, dare_trace_batch

GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0

PLATOON_A = np.array([[0.4360, 0.0, 0.0], [1.0, 1.0, -1.0], [0.0, 0.0, 0.0259]])
PLATOON_B = np.array([[1.0497, 0.0], [0.0, 0.0], [0.0, 0.9353]])


def brute_force_dare(a, b, q, r, iters=200_000, tol=1e-14):
    """Independent oracle: plain fixed-point iteration run to a tighter tol."""
    x = q.copy()
    for _ in range(iters):
        g = b.T @ x @ b + r
        k = np.linalg.solve(g, b.T @ x @ a)
        xn = a.T @ x @ a - a.T @ x @ b @ k + q
        xn = 0.5 * (xn + xn.T)
        if np.abs(xn - x).max() < tol:
            return xn
        x = xn
    return x


class TestSolveDare:
    def test_zero_a_gives_q(self):
        sol = solve_dare([[0.0]], [[1.0]], [[1.0]], [[1.0]])
        assert sol.x[0, 0] == pytest.approx(1.0)
        assert sol.gain[0, 0] == pytest.approx(0.0)

    def test_scalar_golden_ratio(self):
        # x solves x = x - x^2/(x+1) + 1  =>  x^2 = x + 1
        sol = solve_dare([[1.0]], [[1.0]], [[1.0]], [[1.0]])
        assert abs(sol.x[0, 0] - GOLDEN) < 1e-10
        assert abs(sol.gain[0, 0] + 1.0 / GOLDEN) < 1e-10

    def test_platoon_instance_matches_independent_iteration(self):
        q, r = np.eye(3), np.eye(2)
        sol = solve_dare(PLATOON_A, PLATOON_B, q, r)
        x_ref = brute_force_dare(PLATOON_A, PLATOON_B, q, r)
        assert np.abs(sol.x - x_ref).max() < 1e-9
        assert abs(np.trace(sol.x) - np.trace(x_ref)) < 1e-9

    def test_gain_identity(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(-1, 1, (4, 4))
        b = rng.uniform(-1, 1, (4, 2))
        q, r = np.eye(4), np.eye(2)
        sol = solve_dare(a, b, q, r)
        expect = -np.linalg.solve(b.T @ sol.x @ b + r, b.T @ sol.x @ a)
        assert np.abs(sol.gain - expect).max() < 1e-12

    def test_lqr_gain_wrapper(self):
        assert abs(lqr_gain([[1.0]], [[1.0]], [[1.0]], [[1.0]])[0, 0] + 1.0 / GOLDEN) < 1e-10
        assert lqr_gain([[0.0]], [[1.0]], [[1.0]], [[1.0]])[0, 0] == pytest.approx(0.0)

    def test_deterministic_bitwise(self):
        a = np.array([[0.9, 0.2], [0.0, 0.7]])
        b = np.array([[0.0], [1.0]])
        q, r = np.eye(2), np.eye(1)
        s1 = solve_dare(a, b, q, r)
        s2 = solve_dare(a, b, q, r)
        assert s1.x.tobytes() == s2.x.tobytes()
        assert s1.gain.tobytes() == s2.gain.tobytes()
        assert s1.residual == s2.residual

    def test_not_stabilizable_raises(self):
        with pytest.raises(NotStabilizable):
            solve_dare([[2.0]], [[0.0]], [[1.0]], [[1.0]])

    def test_singular_r_raises(self):
        with pytest.raises(SingularR):
            solve_dare([[0.5]], [[1.0]], [[1.0]], [[0.0]])

    def test_warm_start_reaches_same_fixed_point(self):
        q, r = np.eye(3), np.eye(2)
        cold = solve_dare(PLATOON_A, PLATOON_B, q, r)
        warm = solve_dare(PLATOON_A, PLATOON_B, q, r, x0=cold.x + 0.3)
        assert np.abs(cold.x - warm.x).max() < 1e-9


class TestDareTrace:
    def test_matches_solve_dare(self):
        q, r = np.eye(3), np.eye(2)
        tr, x = dare_trace(PLATOON_A, PLATOON_B, q, r)
        sol = solve_dare(PLATOON_A, PLATOON_B, q, r)
        assert abs(tr - np.trace(sol.x)) < 1e-9

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(11)
        q, r = np.eye(3), np.eye(2)
        a_s = np.stack([PLATOON_A] * 8)
        b_s = np.stack([PLATOON_B] * 8)
        a_s[:, 0, 0] = rng.uniform(0, 1, 8)
        a_s[:, 2, 2] = rng.uniform(0, 1, 8)
        b_s[:, 0, 0] = rng.uniform(0.5, 1.5, 8)
        b_s[:, 2, 1] = rng.uniform(0.5, 1.5, 8)
        traces = dare_trace_batch(a_s, b_s, q, r)
        for i in range(8):
            tr, _ = dare_trace(a_s[i], b_s[i], q, r)
            assert abs(traces[i] - tr) < 1e-6


class TestSpectralRadius:
    def test_identity(self):
        assert spectral_radius(np.eye(3)) == pytest.approx(1.0)

    def test_nilpotent(self):
        assert spectral_radius([[0.0, 1.0], [0.0, 0.0]]) == pytest.approx(0.0, abs=1e-8)

    def test_deadbeat_platoon_closed_loop(self):
        a11, b11, a22, b22 = 0.4360, 1.0497, 0.0259, 0.9353
        gain = np.array(
            [[-a11 / b11, 0.0, 0.0], [1.0 / b22, 1.0 / b22, -(1.0 + a22) / b22]]
        )
        closed = PLATOON_A + PLATOON_B @ gain
        assert np.abs(closed @ closed).max() < 1e-12
        assert spectral_radius(closed) < 1e-7

    def test_not_square(self):
        with pytest.raises(NotSquare):
            spectral_radius(np.ones((2, 3)))


class TestStabDetect:
    def test_unstable_uncontrollable(self):
        flags = stab_detect_check([[2.0]], [[0.0]], [[1.0]])
        assert not flags.stabilizable

    def test_unstable_controllable(self):
        flags = stab_detect_check([[2.0]], [[1.0]], [[1.0]])
        assert flags.stabilizable and flags.detectable

    def test_stable_needs_nothing(self):
        flags = stab_detect_check([[0.5]], [[0.0]], [[1.0]])
        assert flags.stabilizable and flags.detectable

    def test_undetectable(self):
        # unstable mode invisible to q
        a = np.array([[1.5, 0.0], [0.0, 0.5]])
        q = np.diag([0.0, 1.0])
        flags = stab_detect_check(a, np.eye(2), q)
        assert flags.stabilizable and not flags.detectable


class TestSymSqrt:
    def test_square_of_sqrt(self):
        rng = np.random.default_rng(3)
        m = rng.uniform(-1, 1, (4, 4))
        q = m @ m.T
        s = sym_sqrt_psd(q)
        assert np.abs(s @ s - q).max() < 1e-10
        assert np.abs(s - s.T).max() < 1e-12


class TestQuadFormDiffBound:
    def test_equal_matrices_zero_lhs(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, (3, 3))
        p = rng.uniform(-1, 1, (3, 3))
        lhs, rhs = quad_form_diff_bound(x, p, x)
        assert lhs == pytest.approx(0.0, abs=1e-12)
        assert rhs >= lhs

    def test_zero_weight(self):
        x = np.eye(2)
        y = 2 * np.eye(2)
        lhs, rhs = quad_form_diff_bound(x, np.zeros((2, 2)), y)
        assert lhs == 0.0 and rhs == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            quad_form_diff_bound(np.eye(2), np.eye(3), np.eye(2))

    def test_random_triples_never_violate(self):
        # direct evaluation is its own oracle
        rng = np.random.default_rng(1234)
        for _ in range(2000):
            n = int(rng.integers(1, 6))
            x = rng.uniform(-1, 1, (n, n))
            p = rng.uniform(-1, 1, (n, n))
            y = rng.uniform(-1, 1, (n, n))
            lhs, rhs = quad_form_diff_bound(x, p, y)
            assert lhs <= rhs + 1e-12


class TestSpectralNorm:
    def test_against_svd(self):
        rng = np.random.default_rng(9)
        m = rng.uniform(-1, 1, (3, 5))
        assert spectral_norm(m) == pytest.approx(np.linalg.svd(m, compute_uv=False)[0])
