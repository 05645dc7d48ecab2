"""Dense numerical kernel: least squares, PSD checks and a small SDP solver.

The SDP solver handles problems of the form::

    minimize    c^T x
    subject to  F0_j + sum_i x_i F_ij  <=  0      (negative semidefinite)
                x >= lower bounds (optional)

with a log-det barrier method, damped Newton steps and a phase-1 stage.
All instances met in this package are small and dense (block orders below
~100), so everything is done with plain numpy linear algebra.
"""

from dataclasses import dataclass, field
from enum import Enum
import math
from typing import Any, NamedTuple, Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import DimensionError, InfeasibleError, NonFiniteError

__all__ = [
    "sym",
    "sym_basis",
    "sym_from_vec",
    "solve_least_squares",
    "check_psd",
    "PsdCheck",
    "LmiBlock",
    "LmiProblem",
    "SolverOptions",
    "SdpStatus",
    "SdpSolution",
    "solve_sdp",
    "bisect_feasibility",
    "BisectionResult",
]


def sym(M):
    """Return the symmetric part of a square array."""
    M = np.asarray(M, dtype=float)
    return 0.5 * (M + M.T)


def sym_basis(n):
    """Basis of the space of symmetric ``n x n`` matrices.

    Returns an array of shape ``(n*(n+1)//2, n, n)``. The element for the
    pair ``(a, b)`` with ``a <= b`` has ones at ``(a, b)`` and ``(b, a)``, so
    a coefficient vector holds the upper-triangle entries of the matrix.
    """
    idx = [(a, b) for a in range(n) for b in range(a, n)]
    E = np.zeros((len(idx), n, n))
    for k, (a, b) in enumerate(idx):
        E[k, a, b] = 1.0
        E[k, b, a] = 1.0
    return E


def sym_from_vec(v, n):
    """Inverse of the :func:`sym_basis` coordinates."""
    return np.tensordot(np.asarray(v, dtype=float), sym_basis(n), axes=1)


def solve_least_squares(A, B):
    """Minimum-norm minimizer of ``||A X - B||_F``.

    Parameters
    ----------
    A : array_like, shape (m, k)
    B : array_like, shape (m, r) or (m,)

    Returns
    -------
    X : ndarray, shape (k, r) or (k,)
        The pseudo-inverse solution ``pinv(A) @ B``.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or A.size == 0:
        raise DimensionError(f"A must be a nonempty 2-D array, got shape {A.shape}")
    if B.ndim not in (1, 2) or B.shape[0] != A.shape[0]:
        raise DimensionError(
            f"B must have {A.shape[0]} rows to match A, got shape {B.shape}")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise NonFiniteError("least-squares data contains non-finite entries")
    if B.size == 0:
        return np.zeros((A.shape[1],) + B.shape[1:])
    X, *_ = np.linalg.lstsq(A, B, rcond=None)
    return X


class PsdCheck(NamedTuple):
    is_psd: bool
    min_eig: float


def check_psd(M, tol=1e-9):
    """Smallest eigenvalue of a symmetric matrix and whether it is ``>= -tol``."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise NonFiniteError("matrix contains non-finite entries")
    if M.shape[0] == 0:
        return PsdCheck(True, math.inf)
    lam = float(np.linalg.eigvalsh(sym(M))[0])
    return PsdCheck(lam >= -tol, lam)


@dataclass(frozen=True)
class LmiBlock:
    """One constraint ``F0 + sum_i x_i Fs[i] <= 0``.

    ``Fs`` has shape ``(num_vars, k, k)``.
    """

    F0: np.ndarray
    Fs: np.ndarray

    @property
    def order(self):
        return self.F0.shape[0]

    def evaluate(self, x):
        if self.Fs.shape[0] == 0:
            return self.F0.copy()
        return self.F0 + np.tensordot(x, self.Fs, axes=1)


@dataclass(frozen=True)
class LmiProblem:
    """Linear objective with a list of block LMI constraints."""

    num_vars: int
    objective: np.ndarray
    blocks: Sequence[LmiBlock]
    var_lower_bounds: Optional[np.ndarray] = None

    def __post_init__(self):
        c = np.asarray(self.objective, dtype=float).reshape(-1)
        if c.shape[0] != self.num_vars:
            raise DimensionError(
                f"objective length {c.shape[0]} != num_vars {self.num_vars}")
        object.__setattr__(self, "objective", c)
        checked = []
        for j, blk in enumerate(self.blocks):
            F0 = np.asarray(blk.F0, dtype=float)
            Fs = np.asarray(blk.Fs, dtype=float)
            k = F0.shape[0] if F0.ndim == 2 else -1
            if F0.ndim != 2 or F0.shape != (k, k):
                raise DimensionError(f"block {j}: F0 must be square, got {F0.shape}")
            if Fs.size == 0 and self.num_vars > 0 and k > 0:
                Fs = np.zeros((self.num_vars, k, k))
            Fs = Fs.reshape(self.num_vars, k, k)
            checked.append(LmiBlock(sym(F0), 0.5 * (Fs + Fs.transpose(0, 2, 1))))
        object.__setattr__(self, "blocks", tuple(checked))
        if self.var_lower_bounds is not None:
            lb = np.asarray(self.var_lower_bounds, dtype=float).reshape(-1)
            if lb.shape[0] != self.num_vars:
                raise DimensionError("var_lower_bounds length must equal num_vars")
            object.__setattr__(self, "var_lower_bounds", lb)

    def max_eigs(self, x):
        """Largest eigenvalue of every block (and bound slack) at ``x``."""
        out = [float(np.linalg.eigvalsh(b.evaluate(x))[-1])
               for b in self.blocks if b.order > 0]
        if self.var_lower_bounds is not None:
            lb = self.var_lower_bounds
            finite = np.isfinite(lb)
            out.extend((lb[finite] - x[finite]).tolist())
        return out


@dataclass(frozen=True)
class SolverOptions:
    feas_tol: float = 1e-7
    gap_tol: float = 1e-8
    max_iter: int = 200
    t_factor: float = 20.0
    null_tol: float = 1e-9
    x0: Optional[np.ndarray] = None


class SdpStatus(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITER = "MaxIter"


@dataclass
class SdpSolution:
    status: SdpStatus
    x: np.ndarray
    objective_value: float
    max_constraint_eig: float
    iterations: int = 0
    message: str = ""
    info: dict = field(default_factory=dict)

    @property
    def ok(self):
        return self.status is SdpStatus.OPTIMAL


class _Infeasible(Exception):
    pass


def _reduce_block(F0, Fs, null_tol, feas_tol):
    """Remove directions on which the block is identically zero.

    On the common kernel K of the variable matrices the block equals the
    constant ``K^T F0 K``. A positive eigenvalue there is an infeasibility
    certificate; so is a zero eigen-direction ``v`` with ``F0 v != 0``
    (feasibility forces ``F(x) v = 0`` while ``F(x) v = F0 v``). Zero
    directions with ``F0 v = 0`` are deflated, which restores strict
    feasibility for faces like the constant null vector of a Laplacian.
    """
    k = F0.shape[0]
    n = Fs.shape[0]
    scale = max(1.0, float(np.abs(F0).max(initial=0.0)),
                float(np.abs(Fs).max(initial=0.0)))
    if n:
        stacked = Fs.reshape(n * k, k)
        K = scipy.linalg.null_space(stacked, rcond=null_tol)
    else:
        K = np.eye(k)
    if K.shape[1] == 0:
        return F0, Fs
    w, E = np.linalg.eigh(K.T @ F0 @ K)
    if w[-1] > feas_tol:
        raise _Infeasible(
            f"constant part of a block has eigenvalue {w[-1]:.3e} > 0")
    zero = w >= -null_tol * scale
    if not np.any(zero):
        return F0, Fs
    Vz = K @ E[:, zero]
    leak = np.linalg.norm(F0 @ Vz, axis=0)
    if np.any(leak > 10 * null_tol * scale):
        raise _Infeasible(
            "a direction with identically zero quadratic form is not in the "
            f"kernel of the constant term (|F0 v| = {leak.max():.3e})")
    T = scipy.linalg.null_space(Vz.T)
    if T.shape[1] == 0:
        return np.zeros((0, 0)), np.zeros((n, 0, 0))
    return T.T @ F0 @ T, np.einsum("ka,ikl,lb->iab", T, Fs, T)


class _Barrier:
    """Log-det barrier for blocks ``F0 + sum x_i Fs[i] <= 0``.

    Blocks of order one are stored together as linear rows ``a x + b <= 0``
    and an optional box ``|x - center| < radius`` is added the same way; the
    box keeps sublevel sets bounded along recession directions.
    """

    def __init__(self, blocks, center=None, radius=math.inf):
        blocks = [(F0, Fs) for F0, Fs in blocks if F0.shape[0] > 0]
        self.mats = [(F0, Fs) for F0, Fs in blocks if F0.shape[0] > 1]
        rows = [Fs[:, 0, 0] for F0, Fs in blocks if F0.shape[0] == 1]
        offs = [F0[0, 0] for F0, Fs in blocks if F0.shape[0] == 1]
        n = blocks[0][1].shape[0] if blocks else (0 if center is None else len(center))
        if center is not None and math.isfinite(radius):
            I = np.eye(n)
            rows.extend(list(I) + list(-I))
            offs.extend(list(-center - radius) + list(center - radius))
        self.a = np.array(rows).reshape(-1, n)
        self.b = np.array(offs, dtype=float)
        self.m = sum(F0.shape[0] for F0, _ in self.mats) + len(self.b)

    def slack(self, x):
        return -(self.a @ x + self.b)

    def chol(self, x):
        """Cholesky factors of ``-F_j(x)``; ``None`` if any is not PD."""
        if len(self.b) and np.min(self.slack(x)) <= 0:
            return None
        out = []
        for F0, Fs in self.mats:
            S = -(F0 + np.tensordot(x, Fs, axes=1))
            try:
                out.append(np.linalg.cholesky(S))
            except np.linalg.LinAlgError:
                return None
        return out

    def value(self, x):
        Ls = self.chol(x)
        if Ls is None:
            return math.inf
        val = -2.0 * sum(np.log(np.diag(Lc)).sum() for Lc in Ls)
        if len(self.b):
            val -= float(np.log(self.slack(x)).sum())
        return val

    def derivatives(self, x, Ls):
        """Gradient, Hessian and the scaled variable matrices at ``x``."""
        n = x.shape[0]
        g = np.zeros(n)
        H = np.zeros((n, n))
        scaled = []
        for (F0, Fs), Lc in zip(self.mats, Ls):
            Linv = scipy.linalg.solve_triangular(Lc, np.eye(Lc.shape[0]), lower=True)
            # Linv F_i Linv^T is the symmetric scaling of S^{-1} F_i
            T = Linv @ Fs @ Linv.T
            g += np.einsum("ijj->i", T)
            Tf = T.reshape(n, -1)
            H += Tf @ Tf.T
            scaled.append(T)
        if len(self.b):
            w = self.a / self.slack(x)[:, None]
            g += w.sum(axis=0)
            H += w.T @ w
        return g, H, scaled

    def step_eigs(self, x, scaled, dx):
        """Values ``mu`` with ``barrier(x + s dx) - barrier(x) = -sum log(1 - s mu)``."""
        mus = [np.linalg.eigvalsh(np.tensordot(dx, T, axes=1)) for T in scaled]
        if len(self.b):
            mus.append((self.a @ dx) / self.slack(x))
        return np.concatenate(mus) if mus else np.zeros(0)


def _psd_solve(H, g):
    """Solve ``H d = g`` for a PSD Hessian, pseudo-inverse on its kernel.

    Barrier gradients are orthogonal to the Hessian kernel, so dropping the
    kernel only discards directions that are flat for the whole problem.
    """
    try:
        Lc = np.linalg.cholesky(H)
        d = scipy.linalg.cho_solve((Lc, True), g)
        if np.all(np.isfinite(d)):
            return d
    except np.linalg.LinAlgError:
        pass
    w, V = np.linalg.eigh(H)
    keep = w > 1e-13 * max(w[-1], 1e-300)
    return V[:, keep] @ ((V[:, keep].T @ g) / w[keep])


def _newton_path(c, barrier, x, opts, t0, stop=None, budget=None,
                 lower_stop=None):
    """Follow the central path from a strictly feasible ``x``.

    Returns ``(x, converged, iterations, gap)``; ``stop(x)`` may end the
    path early (phase 1). After each centering ``c @ x - m / t`` is a lower
    bound on the optimal value; the path also ends once it exceeds
    ``lower_stop``.
    """
    budget = opts.max_iter if budget is None else budget
    m = max(barrier.m, 1)
    t = t0
    it = 0
    while True:
        while True:
            Ls = barrier.chol(x)
            if Ls is None:
                raise RuntimeError("lost strict feasibility in Newton path")
            g_b, H, scaled = barrier.derivatives(x, Ls)
            g = t * c + g_b
            dx = -_psd_solve(H, g)
            lam2 = float(-g @ dx)
            if lam2 <= 1e-8:
                break
            # exact line search data: the barrier along dx is -sum log(1 - s mu)
            mu = barrier.step_eigs(x, scaled, dx)
            slope = t * float(c @ dx)
            mmax = float(mu.max(initial=0.0))
            s = 1.0 if mmax <= 0 else min(1.0, 0.99 / mmax)
            while s > 1e-12:
                df = s * slope - float(np.log1p(-s * mu).sum())
                if df <= -0.25 * s * lam2:
                    break
                s *= 0.5
            else:
                break
            xn = x + s * dx
            if barrier.chol(xn) is None:
                # rounding at the boundary; retreat
                s *= 0.5
                xn = x + s * dx
                if barrier.chol(xn) is None:
                    break
            x = xn
            it += 1
            if stop is not None and stop(x):
                return x, True, it, m / t
            if it >= budget:
                return x, False, it, m / t
            if lam2 <= 1e-6 and s == 1.0:
                break
        gap = m / t
        if gap <= opts.gap_tol * max(1.0, abs(float(c @ x))):
            return x, True, it, gap
        if lower_stop is not None and float(c @ x) - gap > lower_stop:
            return x, False, it, gap
        if np.max(np.abs(x)) > 1e12:
            return x, False, it, gap
        t *= opts.t_factor


def _initial_t(c, barrier, x):
    Ls = barrier.chol(x)
    g_b, H, _ = barrier.derivatives(x, Ls)
    try:
        Hc = np.linalg.solve(H + 1e-12 * np.eye(len(c)) * max(1.0, np.trace(H)), c)
    except np.linalg.LinAlgError:
        return max(1.0, barrier.m / (1.0 + abs(float(c @ x))))
    den = float(c @ Hc)
    if den <= 0:
        return 1.0
    t = -float(g_b @ Hc) / den
    # never start below the scale implied by the current objective value
    floor = barrier.m / (1.0 + abs(float(c @ x)))
    return float(np.clip(t, floor, 1e6)) if t > 0 else max(floor, 1.0)


def solve_sdp(problem, opts=None):
    """Solve an :class:`LmiProblem` with a log-det barrier method.

    The blocks are first cleaned of directions on which they vanish
    identically. Phase 1 then minimizes the largest block eigenvalue. If
    that reaches a strictly negative value, phase 2 follows the central
    path of the original problem. If the best achievable value is only
    within ``feas_tol`` of zero, phase 2 runs on the blocks shifted by
    ``feas_tol * I`` so that the returned point still satisfies every block
    up to the feasibility tolerance.
    """
    opts = opts or SolverOptions()
    n = problem.num_vars
    c = problem.objective
    x = np.zeros(n) if opts.x0 is None else np.asarray(opts.x0, dtype=float).copy()

    def finish(status, x, it, msg="", **info):
        eigs = problem.max_eigs(x)
        return SdpSolution(status, x, float(c @ x) if n else 0.0,
                           max(eigs) if eigs else -math.inf, it, msg, info)

    blocks = []
    for b in problem.blocks:
        if b.order == 0:
            continue
        blocks.append((b.F0, b.Fs))
    if problem.var_lower_bounds is not None:
        for i, lb in enumerate(problem.var_lower_bounds):
            if np.isfinite(lb):
                Fs = np.zeros((n, 1, 1))
                Fs[i, 0, 0] = -1.0
                blocks.append((np.array([[lb]]), Fs))
                if x[i] <= lb:
                    x[i] = lb + 1.0

    if n == 0:
        eigs = problem.max_eigs(x)
        if eigs and max(eigs) > opts.feas_tol:
            return finish(SdpStatus.INFEASIBLE, x, 0, "constant constraints violated")
        return finish(SdpStatus.OPTIMAL, x, 0)

    try:
        reduced = [_reduce_block(F0, Fs, opts.null_tol, opts.feas_tol)
                   for F0, Fs in blocks]
    except _Infeasible as exc:
        return finish(SdpStatus.INFEASIBLE, x, 0, str(exc), stage="reduction")
    reduced = [(F0, Fs) for F0, Fs in reduced if F0.shape[0] > 0]

    used = np.zeros(n, dtype=bool)
    for _, Fs in reduced:
        used |= np.abs(Fs).reshape(n, -1).max(axis=1, initial=0.0) > 0
    if np.any(~used & (c != 0)):
        return finish(SdpStatus.MAX_ITER, x, 0, "objective unbounded in a free variable")
    x[~used] = 0.0
    if not reduced:
        return finish(SdpStatus.OPTIMAL, x, 0)

    def biggest(x):
        return max(float(np.linalg.eigvalsh(F0 + np.tensordot(x, Fs, axes=1))[-1])
                   for F0, Fs in reduced)

    radius = 1e4 * max(1.0, float(np.abs(x).max(initial=0.0)))
    iters = 0
    for attempt in range(3):
        res = _two_phase(c, reduced, x.copy(), opts, radius, biggest)
        iters += res["iters"]
        xr = res["x"]
        # an iterate far out in the box suggests the box itself is binding
        near_edge = np.max(np.abs(xr - x)) > 0.1 * radius
        if not near_edge:
            break
        radius *= 1e3
    if res["status"] is not SdpStatus.INFEASIBLE and near_edge:
        return finish(SdpStatus.MAX_ITER, xr, iters,
                      "objective appears unbounded below", **res["info"])
    return finish(res["status"], xr, iters, res["msg"], **res["info"])


def _two_phase(c, reduced, x, opts, radius, biggest):
    n = len(x)
    center = x.copy()
    iters = 0
    s0 = biggest(x)
    shift = 0.0
    if s0 >= -opts.feas_tol:
        # phase 1: minimize s subject to F_j(x) <= s I
        ph1 = [(F0, np.concatenate([Fs, -np.eye(F0.shape[0])[None]], axis=0))
               for F0, Fs in reduced]
        s_floor = -max(1.0, abs(s0))
        floor = np.zeros((n + 1, 1, 1))
        floor[-1, 0, 0] = -1.0
        ph1.append((np.array([[s_floor]]), floor))
        z = np.append(x, s0 + 1.0 + abs(s0))
        bar1 = _Barrier(ph1, np.append(center, 0.0),
                        max(radius, 4.0 * (abs(s0) + 1.0)))
        c1 = np.zeros(n + 1)
        c1[-1] = 1.0
        z, _, it1, _ = _newton_path(
            c1, bar1, z, opts, max(_initial_t(c1, bar1, z), 1.0),
            stop=lambda z: z[-1] < -opts.feas_tol, lower_stop=opts.feas_tol)
        iters += it1
        x = z[:-1]
        s1 = biggest(x)
        if s1 < -opts.feas_tol:
            pass
        elif s1 <= 0.5 * opts.feas_tol:
            shift = opts.feas_tol
        else:
            return dict(status=SdpStatus.INFEASIBLE, x=x, iters=iters,
                        msg=f"phase 1 stalled at max eigenvalue {s1:.3e}",
                        info={"stage": "phase1"})

    if not np.any(c):
        return dict(status=SdpStatus.OPTIMAL, x=x, iters=iters, msg="",
                    info={"shift": shift})
    work = [(F0 - shift * np.eye(F0.shape[0]), Fs) for F0, Fs in reduced]
    bar = _Barrier(work, center, radius)
    x, ok, it2, gap = _newton_path(c, bar, x, opts, _initial_t(c, bar, x))
    iters += it2
    return dict(status=SdpStatus.OPTIMAL if ok else SdpStatus.MAX_ITER, x=x,
                iters=iters, msg="" if ok else "iteration budget exhausted",
                info={"shift": shift, "gap": gap})


class BisectionResult(NamedTuple):
    alpha: float
    value: float
    payload: Any
    evaluations: int


def bisect_feasibility(lo, hi, oracle, tol=1e-3, log_scale=True, n_grid=9):
    """Search a scalar parameter for the feasible value with the smallest cost.

    ``oracle(alpha)`` returns ``(feasible, value, payload)``. The feasible
    set is assumed to be an interval and ``value`` unimodal on it. A coarse
    grid locates a feasible point, golden-section search refines it, and a
    final bisection pins the minimizer to the feasibility boundary when the
    cost keeps decreasing towards it. ``tol`` is measured in log10 units
    when ``log_scale`` is set, otherwise in plain units.

    Raises
    ------
    InfeasibleError
        If no sampled parameter is feasible.
    """
    if not lo < hi:
        raise ValueError("need lo < hi")
    if log_scale and lo <= 0:
        raise ValueError("log-scale search needs lo > 0")
    fwd = math.log10 if log_scale else (lambda a: a)
    inv = (lambda u: 10.0 ** u) if log_scale else (lambda u: u)
    cache = {}

    def f(u):
        if u not in cache:
            feas, val, payload = oracle(inv(u))
            cache[u] = (bool(feas), float(val) if feas else math.inf, payload)
        return cache[u][1]

    ulo, uhi = fwd(lo), fwd(hi)
    grid = np.linspace(ulo, uhi, max(n_grid, 3))
    vals = [f(u) for u in grid]
    if all(math.isinf(v) for v in vals):
        # the feasible window may be narrower than the grid spacing
        fine = np.linspace(ulo, uhi, 8 * max(n_grid, 3) + 1)
        vals_f = [f(u) for u in fine]
        if all(math.isinf(v) for v in vals_f):
            raise InfeasibleError(f"no feasible parameter in [{lo}, {hi}]")
        grid, vals = fine, vals_f
    ib = int(np.argmin(vals))
    a = grid[max(ib - 1, 0)]
    b = grid[min(ib + 1, len(grid) - 1)]

    gr = (math.sqrt(5.0) - 1.0) / 2.0
    c_ = b - gr * (b - a)
    d_ = a + gr * (b - a)
    while b - a > tol:
        if f(c_) <= f(d_):
            b, d_ = d_, c_
            c_ = b - gr * (b - a)
        else:
            a, c_ = c_, d_
            d_ = a + gr * (b - a)

    feasible = sorted((u, r[1]) for u, r in cache.items() if r[0])
    u_best, v_best = min(feasible, key=lambda p: (p[1], p[0]))
    left_inf = [u for u, r in cache.items() if not r[0] and u < u_best]
    if left_inf:
        # cost decreases towards an infeasible edge: pin the edge
        u_in = max(left_inf)
        while u_best - u_in > tol:
            mid = 0.5 * (u_in + u_best)
            if math.isinf(f(mid)):
                u_in = mid
            elif f(mid) <= v_best:
                u_best, v_best = mid, f(mid)
            else:
                break
    return BisectionResult(inv(u_best), v_best, cache[u_best][2], len(cache))
