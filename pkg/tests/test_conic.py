import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abstrakt.conic import (LmiBlock, LmiProblem, SdpStatus,
                            bisect_feasibility, check_psd, solve_least_squares,
                            solve_sdp, sym, sym_basis, sym_from_vec)
from abstrakt.errors import DimensionError, InfeasibleError, NonFiniteError

from helpers import REFERENCE_Z


# --- least squares -----------------------------------------------------------

def test_lstsq_identity():
    X = solve_least_squares(np.eye(2), [[1, 0], [0, 2]])
    assert np.allclose(X, [[1, 0], [0, 2]])


def test_lstsq_mean_of_stacked_equations():
    assert np.allclose(solve_least_squares([[1], [1]], [[1], [3]]), [[2]])


def test_lstsq_recovers_consistent_solution(rng):
    A = rng.normal(size=(5, 3))
    X0 = rng.normal(size=(3, 2))
    assert np.abs(solve_least_squares(A, A @ X0) - X0).max() < 1e-10


def test_lstsq_minimum_norm():
    # underdetermined: x1 + x2 = 2 has minimum-norm solution (1, 1)
    assert np.allclose(solve_least_squares([[1.0, 1.0]], [[2.0]]), [[1], [1]])


def test_lstsq_errors():
    with pytest.raises(DimensionError):
        solve_least_squares(np.eye(2), np.ones((3, 1)))
    with pytest.raises(NonFiniteError):
        solve_least_squares([[np.nan]], [[1.0]])


@settings(max_examples=50, deadline=None)
@given(m=st.integers(3, 8), k=st.integers(1, 3), r=st.integers(1, 3),
       seed=st.integers(0, 2 ** 31))
def test_lstsq_residual_orthogonal(m, k, r, seed):
    g = np.random.default_rng(seed)
    A = g.normal(size=(m, k))
    B = g.normal(size=(m, r))
    X = solve_least_squares(A, B)
    assert np.abs(A.T @ (A @ X - B)).max() <= 1e-8


# --- PSD checks --------------------------------------------------------------

def test_check_psd_examples():
    assert check_psd(np.eye(3)) == (True, 1.0)
    res = check_psd(np.diag([1.0, -2.0]))
    assert not res.is_psd and res.min_eig == pytest.approx(-2.0)
    res = check_psd(REFERENCE_Z)
    assert res.is_psd and res.min_eig >= -1e-6


def test_check_psd_nonfinite():
    with pytest.raises(NonFiniteError):
        check_psd([[np.inf]])


def test_sym_basis_roundtrip(rng):
    S = sym(rng.normal(size=(4, 4)))
    E = sym_basis(4)
    v = np.array([S[a, b] for a in range(4) for b in range(a, 4)])
    assert np.allclose(sym_from_vec(v, 4), S)
    assert E.shape == (10, 4, 4)


# --- SDP ---------------------------------------------------------------------

def scalar_block(F0, coeffs):
    return LmiBlock(np.array([[F0]]), np.array(coeffs, dtype=float).reshape(-1, 1, 1))


def test_sdp_scalar():
    # minimize x  s.t.  1 - x <= 0
    sol = solve_sdp(LmiProblem(1, np.array([1.0]), [scalar_block(1.0, [-1.0])]))
    assert sol.status is SdpStatus.OPTIMAL
    assert sol.x[0] == pytest.approx(1.0, abs=1e-6)


def test_sdp_min_eigenvalue():
    # maximize lam  s.t.  lam I - diag(1, 3) <= 0
    blk = LmiBlock(-np.diag([1.0, 3.0]), np.eye(2)[None])
    sol = solve_sdp(LmiProblem(1, np.array([-1.0]), [blk]))
    assert sol.ok
    assert sol.x[0] == pytest.approx(1.0, abs=1e-6)


def test_sdp_infeasible():
    # x >= 1 and x <= 0
    prob = LmiProblem(1, np.array([1.0]), [scalar_block(1.0, [-1.0]), scalar_block(0.0, [1.0])])
    assert solve_sdp(prob).status is SdpStatus.INFEASIBLE


def test_sdp_lower_bounds():
    # minimize x + y  s.t.  x >= 2, y >= -1 (bounds only, plus a loose block)
    prob = LmiProblem(2, np.array([1.0, 1.0]), [scalar_block(-100.0, [1.0, 1.0])],
                      var_lower_bounds=np.array([2.0, -1.0]))
    sol = solve_sdp(prob)
    assert sol.ok
    assert np.allclose(sol.x, [2.0, -1.0], atol=1e-5)


def test_sdp_degenerate_empty():
    sol = solve_sdp(LmiProblem(0, np.zeros(0), []))
    assert sol.status is SdpStatus.OPTIMAL


def test_sdp_unbounded_reports_maxiter():
    # minimize x with only x <= 5: unbounded below
    sol = solve_sdp(LmiProblem(1, np.array([1.0]), [scalar_block(-5.0, [1.0])]))
    assert sol.status is SdpStatus.MAX_ITER


def test_sdp_weakly_feasible_face():
    # [[x, 1], [1, y]] >= 0 with x + y minimal: optimum x = y = 1 (rank-one face)
    F0 = np.array([[0.0, -1.0], [-1.0, 0.0]])
    Fs = np.array([-np.diag([1.0, 0.0]), -np.diag([0.0, 1.0])])
    sol = solve_sdp(LmiProblem(2, np.array([1.0, 1.0]), [LmiBlock(F0, Fs)]))
    assert sol.ok
    assert sol.x.sum() == pytest.approx(2.0, abs=1e-5)


def _random_sdp(g, n, k):
    # feasible by construction: x0 satisfies every block strictly
    x0 = g.normal(size=n)
    Fs = np.array([sym(g.normal(size=(k, k))) for _ in range(n)])
    S = g.normal(size=(k, k))
    F0 = -np.tensordot(x0, Fs, axes=1) - (S @ S.T + 0.1 * np.eye(k))
    # bounded: tr(sum x_i Fi) objective direction is a PSD combination
    c = np.array([-np.trace(F) for F in Fs])
    box = [scalar_block(-10.0, e) for e in np.eye(n)] + [scalar_block(-10.0, -e) for e in np.eye(n)]
    return LmiProblem(n, c, [LmiBlock(F0, Fs)] + box)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 4), k=st.integers(1, 4), seed=st.integers(0, 2 ** 31))
def test_sdp_solutions_reverified(n, k, seed):
    prob = _random_sdp(np.random.default_rng(seed), n, k)
    sol = solve_sdp(prob)
    assert sol.ok
    for b in prob.blocks:
        assert check_psd(-b.evaluate(sol.x), tol=1e-7).is_psd


def test_sdp_matches_reference_solver():
    cp = pytest.importorskip("cvxpy")
    g = np.random.default_rng(7)
    for _ in range(8):
        prob = _random_sdp(g, 3, 3)
        sol = solve_sdp(prob)
        x = cp.Variable(3)
        cons = [b.F0 + sum(x[i] * b.Fs[i] for i in range(3)) << 0 for b in prob.blocks]
        ref = cp.Problem(cp.Minimize(prob.objective @ x), cons)
        ref.solve(solver=cp.CLARABEL)
        assert sol.objective_value == pytest.approx(ref.value, abs=1e-5)


# --- bisection ---------------------------------------------------------------

def test_bisect_interval():
    res = bisect_feasibility(0.1, 10.0, lambda a: (1 <= a <= 2, a, a), tol=1e-3)
    assert res.alpha == pytest.approx(1.0, abs=5e-3)
    assert 1 <= res.payload <= 2


def test_bisect_never_feasible():
    with pytest.raises(InfeasibleError):
        bisect_feasibility(0.1, 10.0, lambda a: (False, 0.0, None))


def test_bisect_left_neighbor_infeasible():
    tol = 1e-3
    res = bisect_feasibility(0.1, 10.0, lambda a: (1 <= a <= 2, a, None), tol=tol)
    left = math.log10(res.alpha) - tol
    assert not (1 <= 10 ** left <= 2)


def test_bisect_interior_minimum():
    res = bisect_feasibility(1e-2, 1e2, lambda a: (True, (math.log10(a) - 0.5) ** 2, None),
                             tol=1e-4)
    assert math.log10(res.alpha) == pytest.approx(0.5, abs=1e-3)


def test_bisect_rejects_bad_range():
    with pytest.raises(ValueError):
        bisect_feasibility(2.0, 1.0, lambda a: (True, 0.0, None))
