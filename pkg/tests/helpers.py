"""Shared constructions for the tests."""

import numpy as np

from abstrakt.linear import LinearSystem

REFERENCE_Z = np.array([[2.0016, -1.0490, -0.9526], [-1.0490, 1.9897, -0.9407],
                        [-0.9526, -0.9407, 1.8933]])
REFERENCE_MBAR = np.array([[-1 / 3, 1 / 6, 1 / 6], [1 / 14, -1 / 7, 1 / 14],
                           [1 / 10, 1 / 10, -1 / 5]])


def ring(L):
    M = -2.0 * np.eye(L)
    for l in range(L):
        M[l, (l + 1) % L] = M[l, (l - 1) % L] = 1.0
    return M


def pbh_margin(sys, shift=0.1):
    """Smallest PBH singular value over eigenvalues with Re >= -shift."""
    out = np.inf
    for lam in np.linalg.eigvals(sys.A):
        if lam.real >= -shift:
            M = np.hstack([sys.A - lam * np.eye(sys.n), sys.B])
            out = min(out, np.linalg.svd(M, compute_uv=False)[-1])
    return out


def random_system(rng, n_max=6, margin=0.2):
    """Random (A, B, C) with n <= n_max, a PBH margin and n_hat < n."""
    while True:
        n = int(rng.integers(2, n_max + 1))
        m = int(rng.integers(1, n + 1))
        nh = int(rng.integers(1, n))
        s = LinearSystem(rng.normal(size=(n, n)), rng.normal(size=(n, m)),
                         rng.normal(size=(1, n)))
        if s.is_stabilizable() and pbh_margin(s) > margin:
            return s, nh


def simulate_error(A_cl, W, d_seq, h, substeps=10):
    """Exact piecewise-constant response of e' = A_cl e + W d from e(0) = 0.

    ``d_seq`` has shape (segments, dim_d, runs). Returns the largest
    ``|e|`` seen on the grid of ``substeps`` points per segment.
    """
    import scipy.linalg
    n = A_cl.shape[0]
    k = W.shape[1]
    dt = h / substeps
    M = np.zeros((n + k, n + k))
    M[:n, :n] = A_cl
    M[:n, n:] = W
    E = scipy.linalg.expm(M * dt)
    Phi, Gam = E[:n, :n], E[:n, n:]
    e = np.zeros((n, d_seq.shape[2]))
    worst = 0.0
    for d in d_seq:
        for _ in range(substeps):
            e = Phi @ e + Gam @ d
            worst = max(worst, float(np.linalg.norm(e, axis=0).max()))
    return worst


def random_exists_instance(g):
    """(Mtilde, Ybar) with a negative semidefinite symmetric part of random rank."""
    L = int(g.integers(2, 8))
    qh = int(g.integers(1, 4))
    rank = int(g.integers(0, L + 1))
    R = g.normal(size=(L, rank))
    S = g.normal(size=(L, L))
    Mt = -R @ R.T + (S - S.T) * float(g.random() < 0.5)
    if g.integers(0, 3) == 0 and rank:
        Yb = R @ g.normal(size=(rank, qh))   # inside the range, so feasible
    else:
        Yb = g.normal(size=(L, qh))          # generically infeasible when rank < L
    return Mt, Yb


def brute_force_partition(Mt, N, fixed=None):
    """Smallest within-group sum of squares over every assignment.

    Vectorized over all ``N**L`` assignment vectors; ``fixed`` holds forced
    groups or ``-1``. Returns ``(cost, assignments)`` where the second
    entry lists every optimal assignment (ties within 1e-9).
    """
    import itertools
    L = Mt.shape[0]
    fixed = np.full(L, -1) if fixed is None else np.asarray(fixed)
    A = np.array(list(itertools.product(range(N), repeat=L)))
    keep = np.all((fixed < 0) | (A == fixed), axis=1)
    A = A[keep]
    P = np.eye(N)[A]                                   # (K, L, N)
    counts = P.sum(axis=1)                             # (K, N)
    nonempty = np.all(counts > 0, axis=1)
    A, P, counts = A[nonempty], P[nonempty], counts[nonempty]
    MP = np.einsum("ab,kbn->kan", Mt, P)               # (K, L, N)
    means = np.einsum("kag,kan->kgn", P, MP) / counts[:, :, None]
    fitted = np.einsum("kag,kgn->kan", P, means)
    cost = ((MP - fitted) ** 2).sum(axis=(1, 2))
    best = cost.min()
    return float(best), A[cost <= best + 1e-9 * max(1.0, best)]
