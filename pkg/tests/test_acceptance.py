"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line in ``RESULTS``; the conftest hook
prints them at the end of the session. Running this file directly does
the same without pytest.
"""

import json
import math
import time
import warnings

import numpy as np
import pytest

from abstrakt.aggregation import (Partition, PreAssignment, is_equitable, partition_matrix,
                                  partition_search)
from abstrakt.cli import main
from abstrakt.compose import (ParamK, SubsystemCert, SupplyRate, assemble_global,
                              check_dissipation_samples, exists_Z, fit_coupling, q_matrix,
                              solve_relaxed)
from abstrakt.conic import LmiBlock, LmiProblem, check_psd, solve_least_squares, solve_sdp, sym
from abstrakt.errors import InfeasibleError
from abstrakt.linear import UnstableAbstractionWarning, fit_abstraction, synth_gain

from helpers import (REFERENCE_MBAR, REFERENCE_Z, brute_force_partition, random_exists_instance,
                     random_system, ring, simulate_error)

RESULTS = {}


def record(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def table_pre(L=30):
    return PreAssignment.from_groups(L, [range(0, 6), range(10, 18), range(20, 27)])


def passivity_groups(p):
    return [SubsystemCert(np.eye(k), np.ones((k, 1)), np.ones((k, 1)),
                          SupplyRate.passivity(int(k)), ParamK(1.0, 2), ParamK(1.0, 1),
                          ParamK(0.0, 1)) for k in p.sizes]


def test_criterion_1_table_partition():
    t0 = time.perf_counter()
    p = partition_search(ring(30), table_pre(), 3)
    dt = time.perf_counter() - t0
    groups = [(g + 1).tolist() for g in p.groups()]
    want = [list(range(1, 7)), list(range(7, 21)), list(range(21, 31))]
    err = float(np.abs(p.Mbar - REFERENCE_MBAR).max())
    record(1, groups == want and err <= 1e-12 and dt < 10,
           f"groups match={groups == want}, max |Mbar - printed| = {err:.1e}, {dt:.2f} s")


def test_criterion_2_reference_Z():
    t0 = time.perf_counter()
    p = partition_search(ring(30), table_pre(), 3)
    o = p.order
    Mg = ring(30)[np.ix_(o, o)]
    certs = passivity_groups(p)
    G = assemble_global(certs, np.ones(3))
    fit = fit_coupling(G.W, Mg, G.H, G.W_hat)
    Qp = q_matrix(fit.Y, G.W, Mg, certs, REFERENCE_Z, np.ones(3))
    printed_ok = check_psd(-Qp, tol=1e-6).is_psd
    comp = solve_relaxed(fit.Y, G.W, Mg, certs, pin_mu=True, Mhat=fit.Mhat)
    # independent re-check of the returned Z
    q_max = float(np.linalg.eigvalsh(q_matrix(fit.Y, G.W, Mg, certs, comp.Z, comp.mu))[-1])
    tr = float(np.trace(comp.Z))
    dt = time.perf_counter() - t0
    ok = printed_ok and tr <= 5.8846 * 1.01 and q_max <= 1e-6 and dt < 30
    record(2, ok, f"printed Z max eig(Q) = {np.linalg.eigvalsh(Qp)[-1]:.1e}, "
                  f"tr Z = {tr:.6f} (limit {5.8846 * 1.01:.4f}), our max eig(Q) = {q_max:.1e}, "
                  f"{dt:.2f} s")


def test_criterion_3_residual_columns():
    g = np.random.default_rng(31)
    worst = 0.0
    for _ in range(500):
        L = int(g.integers(4, 21))
        N = int(g.integers(1, min(L, 6) + 1))
        Mt = g.normal(size=(L, L))
        a = g.permutation(np.concatenate([np.arange(N), g.integers(0, N, L - N)]))
        p = Partition.from_assign(Mt, a, N)
        worst = max(worst, float(np.abs(p.Ybar.T @ np.ones(L)).max()))
    record(3, worst <= 1e-10, f"max |Ybar^T 1| over 500 instances = {worst:.1e}")


def test_criterion_4_equitability_and_search():
    left = is_equitable(ring(5), partition_matrix([0, 1, 2, 2, 1], 3))
    right = is_equitable(ring(5), partition_matrix([0, 1, 1, 2, 2], 3))
    left_ok = left["equitable"] and np.allclose(left["Mbar"], [[-2, 2, 0], [1, -2, 1], [0, 1, -1]],
                                                atol=1e-12)
    right_ok = (not right["equitable"]) and right["residual_norm"] > 0.5
    g = np.random.default_rng(44)
    agree, tried = 0, 0
    while tried < 50:
        L = int(g.integers(3, 11))
        N = int(g.integers(1, min(L, 3) + 1))
        Mt = g.normal(size=(L, L)) if g.random() < 0.5 else -ring(L) * g.random((L, L))
        fixed = np.full(L, -1)
        if g.random() < 0.5:
            sel = g.permutation(L)[:int(g.integers(0, L // 2 + 1))]
            fixed[sel] = g.integers(0, N, sel.size)
        pre = PreAssignment(np.array([np.eye(N)[f] if f >= 0 else np.zeros(N) for f in fixed]))
        try:
            p = partition_search(Mt, pre, N)
        except InfeasibleError:
            continue
        tried += 1
        cost, optimal = brute_force_partition(Mt, N, fixed)
        same = abs(p.residual_norm ** 2 - cost) <= 1e-9 * max(1.0, cost)
        member = any(np.array_equal(p.assign, a) for a in optimal)
        agree += int(same and member)
    record(4, left_ok and right_ok and agree == 50,
           f"left equitable={left_ok}, right residual={right['residual_norm']:.4f}, "
           f"branch and bound optimal on {agree}/50")


def test_criterion_5_invariant_ellipsoid():
    t0 = time.perf_counter()
    g = np.random.default_rng(55)
    worst_lmi, worst_gap, n_ok = -math.inf, -math.inf, 0
    for _ in range(20):
        s, nh = random_system(g)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UnstableAbstractionWarning)
            ab = fit_abstraction(s, g.normal(size=(s.n, nh)))
        c = synth_gain(s, ab)
        lmi = float(np.linalg.eigvalsh(c.lmi_matrix(s.A, s.B))[-1])
        h = 0.5 / c.alpha
        segs = int(math.ceil(50.0 / c.alpha / h))
        d = g.normal(size=(segs, c.W.shape[1], 100))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        # a quarter of the runs hold one direction for the full horizon
        d[:, :, :25] = d[:1, :, :25]
        e_max = simulate_error(c.A_cl, c.W, d, h)
        worst_lmi = max(worst_lmi, lmi)
        worst_gap = max(worst_gap, e_max - c.e_bar)
        n_ok += int(lmi <= 1e-6 and e_max <= c.e_bar + 1e-3)
    dt = time.perf_counter() - t0
    record(5, n_ok == 20 and dt < 120,
           f"{n_ok}/20 systems, worst LMI max eig = {worst_lmi:.1e}, "
           f"worst max|e| - e_bar = {worst_gap:.3e}, {dt:.1f} s")


def _ex23(quartic):
    f = lambda x, xh, u: np.array([-1.5 * x[0] ** 3, -x[1] ** 3])
    fh = lambda xh, u: np.array([-1.5 * xh[0] ** 3])
    V = lambda x, xh: 0.5 * float(np.sum((x - xh[0]) ** 2))
    grad = lambda x, xh: (x - xh[0], np.array([-np.sum(x - xh[0])]))
    rhs = lambda x, xh, u: -V(x, xh) ** 2 / 8 + (0.375 * xh[0] ** 4 if quartic else 0.0)
    return check_dissipation_samples(f, fh, V, rhs, ([-3.0] * 3, [3.0] * 3), 2, 1,
                                     n_samples=10_000, tol=1e-9, grad=grad)


def test_criterion_6_practical_simulation_example():
    rep = _ex23(True)
    neg = _ex23(False)
    record(6, rep.passed and rep.max_violation <= 1e-9 and neg.max_violation > 0,
           f"max violation = {rep.max_violation:.3e} over {rep.n_samples} points, "
           f"without the quartic term = {neg.max_violation:.3e}")


def test_criterion_7_existence_equivalence():
    g = np.random.default_rng(77)
    agree, witness_ok, feasible = 0, 0, 0
    for _ in range(100):
        Mt, Yb = random_exists_instance(g)
        L = Mt.shape[0]
        ex = exists_Z(Mt, Yb)
        cert = SubsystemCert(np.eye(L), np.ones((L, 1)), np.eye(L), SupplyRate.passivity(L),
                             ParamK(1.0, 2), ParamK(1.0, 1), ParamK(0.0, 1))
        try:
            solve_relaxed(Yb, np.eye(L), Mt, [cert], pin_mu=True)
            solved = True
        except InfeasibleError:
            solved = False
        agree += int(solved == ex.exists)
        if ex.exists:
            feasible += 1
            Q = np.block([[-ex.Z, 0.5 * Yb.T], [0.5 * Yb, 0.5 * (Mt + Mt.T)]])
            scale = max(1.0, float(np.abs(Q).max()))
            witness_ok += int(check_psd(ex.Z, tol=1e-12).is_psd
                              and check_psd(-Q, tol=1e-8 * scale).is_psd)
    record(7, agree == 100 and witness_ok == feasible,
           f"agreement {agree}/100, witness valid on {witness_ok}/{feasible} feasible instances")


def test_criterion_8_thermal_end_to_end(tmp_path):
    t0 = time.perf_counter()
    code = main(["reproduce-paper", "--out", str(tmp_path)])
    dt = time.perf_counter() - t0
    with open(tmp_path / "summary.json") as f:
        s = json.load(f)
    reach = s["reach_times"]
    shown = [None if t is None else round(t, 2) for t in reach]
    ok = (code == 0 and s["envelope_respected"] and s["errors_respected"]
          and all(t is not None and t <= 20.0 for t in reach) and dt < 60)
    record(8, ok, f"exit {code}, envelope {s['envelope_respected']}, room errors "
                  f"{s['errors_respected']}, reach times {shown} min, {dt:.1f} s")


def test_criterion_9_numerics():
    from abstrakt.thermal import build_network, simulate
    net = build_network(30, seed=0)
    p = partition_search(net.Mtilde, table_pre(), 3)
    a = simulate(net, p, horizon=60.0, dt=0.02)
    b = simulate(net, p, horizon=60.0, dt=0.01)
    rk = float(max(np.abs(a.x[:, -1] - b.x[:, -1]).max(), np.abs(a.xh[:, -1] - b.xh[:, -1]).max()))
    g = np.random.default_rng(99)
    orth = 0.0
    for _ in range(200):
        m, k = int(g.integers(1, 12)), int(g.integers(1, 8))
        A = g.normal(size=(m, k)) @ g.normal(size=(k, int(g.integers(1, 8))))
        Bm = g.normal(size=(m, int(g.integers(1, 4))))
        X = solve_least_squares(A, Bm)
        r = Bm - A @ X
        orth = max(orth, float(np.abs(A.T @ r).max()) / max(1.0, float(np.abs(Bm).max())))
    sdp_worst = -math.inf
    for _ in range(30):
        n, k = int(g.integers(1, 5)), int(g.integers(1, 5))
        x0 = g.normal(size=n)
        Fs = np.array([sym(g.normal(size=(k, k))) for _ in range(n)])
        S = g.normal(size=(k, k))
        F0 = -np.tensordot(x0, Fs, axes=1) - (S @ S.T + 0.1 * np.eye(k))
        box = [LmiBlock(np.array([[-10.0]]), s_[:, None, None] * np.ones((n, 1, 1)))
               for s_ in list(np.eye(n)) + list(-np.eye(n))]
        prob = LmiProblem(n, np.array([-np.trace(F) for F in Fs]), [LmiBlock(F0, Fs)] + box)
        sol = solve_sdp(prob)
        # rebuild each block by hand rather than through the solver's evaluate
        for blk in prob.blocks:
            Fx = blk.F0 + sum(sol.x[i] * blk.Fs[i] for i in range(n))
            sdp_worst = max(sdp_worst, float(np.linalg.eigvalsh(sym(Fx))[-1]))
    ok = rk < 1e-6 and orth <= 1e-8 and sdp_worst <= 1e-7
    record(9, ok, f"RK4 halving change = {rk:.1e} C, lstsq orthogonality = {orth:.1e}, "
                  f"SDP max block eig = {sdp_worst:.1e}")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q"]))
