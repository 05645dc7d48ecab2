"""Aggregation of networked agents into groups.

Agents ``l = 0..L-1`` are coupled through ``Mt`` (``w^l = sum_k Mt[l, k]
sigma(x^k)``). A partition into ``N`` groups is a binary ``L x N`` matrix
``P``; the best group coupling ``Mbar`` minimizes ``||Mt P - P Mbar||_F``
and has the closed form of column-block means. Group indices are 0-based
throughout.
"""

from dataclasses import dataclass, field
import itertools
import math
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

from .compose import ParamK, SubsystemCert, SupplyRate
from .errors import ConditionError, DimensionError, InfeasibleError

__all__ = [
    "partition_matrix",
    "PreAssignment",
    "Partition",
    "optimal_group_coupling",
    "is_equitable",
    "partition_search",
    "enumerate_partitions",
    "AgentSpec",
    "StorageProfile",
    "agent_storage_profile",
    "group_subsystem",
    "to_dot",
]


def partition_matrix(assign, N=None):
    """Binary ``L x N`` matrix with ``P[l, assign[l]] = 1``."""
    assign = np.asarray(assign, dtype=int).reshape(-1)
    if assign.size and assign.min() < 0:
        raise ValueError("group indices must be nonnegative")
    N = int(assign.max()) + 1 if N is None else int(N)
    if assign.size and assign.max() >= N:
        raise ValueError(f"group index {assign.max()} out of range for N={N}")
    P = np.zeros((assign.size, N))
    P[np.arange(assign.size), assign] = 1.0
    return P


def _assign_from_P(P):
    P = np.asarray(P)
    if P.ndim != 2 or not np.all((P == 0) | (P == 1)):
        raise ValueError("P must be a binary matrix")
    if not np.all(P.sum(axis=1) == 1):
        raise ValueError("every row of P needs exactly one 1")
    if not np.all(P.sum(axis=0) >= 1):
        raise InfeasibleError("partition has an empty group",
                              diagnosis={"empty_groups": np.flatnonzero(P.sum(axis=0) == 0).tolist()})
    return P.argmax(axis=1)


def _square(Mt):
    Mt = np.atleast_2d(np.asarray(Mt, dtype=float))
    if Mt.shape[0] != Mt.shape[1]:
        raise DimensionError(f"coupling matrix must be square, got {Mt.shape}")
    return Mt


def optimal_group_coupling(Mtilde, P):
    """Closed-form ``argmin_Mbar ||Mt P - P Mbar||_F``.

    Entry ``(i, j)`` is the mean over the rows of group ``i`` of the
    column ``j`` of ``Mt P``.

    Raises
    ------
    InfeasibleError
        If a group is empty.
    """
    Mt = _square(Mtilde)
    P = np.asarray(P, dtype=float)
    if P.shape[0] != Mt.shape[0]:
        raise DimensionError(f"P has {P.shape[0]} rows, coupling has {Mt.shape[0]}")
    _assign_from_P(P)
    counts = P.sum(axis=0)
    return (P.T @ (Mt @ P)) / counts[:, None]


def _residual(Mt, P, Mbar):
    return Mt @ P - P @ Mbar


@dataclass(frozen=True)
class Partition:
    """A grouping with its optimal coupling and residual."""

    assign: np.ndarray
    N: int
    Mbar: np.ndarray
    Ybar: np.ndarray
    info: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_assign(cls, Mtilde, assign, N=None, **info):
        Mt = _square(Mtilde)
        P = partition_matrix(assign, N)
        Mbar = optimal_group_coupling(Mt, P)
        return cls(np.asarray(assign, dtype=int).copy(), P.shape[1], Mbar,
                   _residual(Mt, P, Mbar), dict(info))

    @property
    def L(self):
        return self.assign.size

    @property
    def P(self):
        return partition_matrix(self.assign, self.N)

    @property
    def residual_norm(self):
        return float(np.linalg.norm(self.Ybar))

    @property
    def sizes(self):
        return np.bincount(self.assign, minlength=self.N)

    def groups(self):
        return [np.flatnonzero(self.assign == i) for i in range(self.N)]

    @property
    def order(self):
        """Agent permutation listing group 0 first, then group 1 and so on."""
        return np.argsort(self.assign, kind="stable")

    def to_dict(self):
        d = {"assign": self.assign.tolist(), "N": self.N, "Mbar": self.Mbar.tolist(),
             "Ybar": self.Ybar.tolist(), "residual_norm": self.residual_norm}
        d.update({k: v for k, v in self.info.items()
                  if isinstance(v, (int, float, str, bool)) or v is None})
        return d

    @classmethod
    def from_dict(cls, d, Mtilde):
        return cls.from_assign(Mtilde, d["assign"], d.get("N"))


def is_equitable(Mtilde, P, tol=1e-9):
    """``{"equitable", "Mbar", "residual_norm"}`` for a partition matrix."""
    Mt = _square(Mtilde)
    P = np.asarray(P, dtype=float)
    Mbar = optimal_group_coupling(Mt, P)
    r = float(np.linalg.norm(_residual(Mt, P, Mbar)))
    return {"equitable": r <= tol, "Mbar": Mbar, "residual_norm": r}


@dataclass(frozen=True)
class PreAssignment:
    """Agents forced into groups.

    ``Pbar`` is ``L x N`` binary with zero rows for free agents and
    ``T = diag(Pbar^T 1)``.
    """

    Pbar: np.ndarray

    def __post_init__(self):
        Pb = np.atleast_2d(np.asarray(self.Pbar, dtype=float))
        if not np.all((Pb == 0) | (Pb == 1)):
            raise ValueError("Pbar must be binary")
        if np.any(Pb.sum(axis=1) > 1):
            raise ValueError("an agent can be pre-assigned to at most one group")
        object.__setattr__(self, "Pbar", Pb)

    @classmethod
    def from_groups(cls, L, groups):
        """Build from lists of 0-based agent indices, one list per group."""
        Pb = np.zeros((L, len(groups)))
        for i, g in enumerate(groups):
            Pb[np.asarray(g, dtype=int), i] += 1.0
        return cls(Pb)

    @classmethod
    def none(cls, L, N):
        return cls(np.zeros((L, N)))

    @property
    def T(self):
        return np.diag(self.Pbar.sum(axis=0))

    @property
    def fixed(self):
        """Length-``L`` vector of forced groups, ``-1`` for free agents."""
        out = np.full(self.Pbar.shape[0], -1)
        r, c = np.nonzero(self.Pbar)
        out[r] = c
        return out


class _Search:
    """Depth-first branch and bound over assignment vectors.

    The bound at a partial assignment is the residual restricted to rows
    whose whole support is already assigned: those entries of ``Mt P`` are
    final, and the within-group sum of squared deviations of a subset of
    rows never exceeds that of the full group. The bound is therefore
    monotone and exact at the leaves.
    """

    def __init__(self, Mt, N, fixed, node_limit=None):
        self.Mt = Mt
        self.L = Mt.shape[0]
        self.N = N
        self.fixed = fixed
        self.support = [np.flatnonzero(Mt[l] != 0) for l in range(self.L)]
        self.free = [l for l in range(self.L) if fixed[l] < 0]
        # groups without pre-assigned agents are interchangeable
        self.open_groups = [i for i in range(N) if not np.any(fixed == i)]
        self.best = math.inf
        self.best_assign = None
        self.nodes = 0
        self.node_limit = node_limit
        self.tol = 1e-12 * max(1.0, float(np.abs(Mt).sum()) ** 2)
        self.exhausted = False

    def bound(self, assign):
        known = assign >= 0
        P = np.zeros((self.L, self.N))
        P[known, assign[known]] = 1.0
        R = self.Mt @ P
        det = known.copy()
        for l in np.flatnonzero(known):
            if not np.all(known[self.support[l]]):
                det[l] = False
        if not det.any():
            return 0.0
        Pd = P * det[:, None]
        cnt = Pd.sum(axis=0)
        s1 = Pd.T @ R
        s2 = Pd.T @ (R * R)
        with np.errstate(invalid="ignore", divide="ignore"):
            ssd = np.where(cnt[:, None] > 0, s2 - s1 ** 2 / np.maximum(cnt, 1)[:, None], 0.0)
        return float(np.maximum(ssd, 0.0).sum())

    def run(self):
        assign = self.fixed.copy()
        self._dfs(assign, 0)
        return self.best_assign

    def _dfs(self, assign, depth):
        if self.node_limit is not None and self.nodes >= self.node_limit:
            self.exhausted = True
            return
        self.nodes += 1
        lb = self.bound(assign)
        if lb >= self.best - self.tol:
            return
        if depth == len(self.free):
            if np.all(np.bincount(assign, minlength=self.N) > 0):
                self.best = lb
                self.best_assign = assign.copy()
            return
        counts = np.bincount(assign[assign >= 0], minlength=self.N)
        empty = int(np.sum(counts == 0))
        if empty > len(self.free) - depth:
            return
        l = self.free[depth]
        first_open = next((i for i in self.open_groups if counts[i] == 0), None)
        for g in range(self.N):
            if g in self.open_groups and counts[g] == 0 and g != first_open:
                continue
            assign[l] = g
            self._dfs(assign, depth + 1)
            assign[l] = -1


def _cost(Mt, assign, N):
    P = partition_matrix(assign, N)
    Mbar = (P.T @ (Mt @ P)) / P.sum(axis=0)[:, None]
    return float(np.sum(_residual(Mt, P, Mbar) ** 2))


def _local_search(Mt, N, fixed, max_rounds=200):
    """Greedy construction followed by single-agent moves."""
    assign = fixed.copy()
    free = np.flatnonzero(fixed < 0)
    used = set(int(g) for g in fixed[fixed >= 0])
    empties = [g for g in range(N) if g not in used]
    for l, g in zip(free, empties):
        assign[l] = g
    for l in free:
        if assign[l] >= 0:
            continue
        nb = [assign[k] for k in np.flatnonzero(Mt[l] != 0) if assign[k] >= 0 and k != l]
        assign[l] = min(nb) if nb else 0
    if np.any(np.bincount(assign, minlength=N) == 0):
        raise InfeasibleError("greedy construction left a group empty")
    cost = _cost(Mt, assign, N)
    for _ in range(max_rounds):
        improved = False
        for l in free:
            cur = assign[l]
            if np.sum(assign == cur) == 1:
                continue
            for g in range(N):
                if g == cur:
                    continue
                assign[l] = g
                c = _cost(Mt, assign, N)
                if c < cost - 1e-12:
                    cost, cur, improved = c, g, True
                else:
                    assign[l] = cur
        if not improved:
            break
    return assign, cost


def partition_search(Mtilde, pre=None, N=None, max_exact_free=60, node_limit=None):
    """Globally optimal grouping respecting pre-assignments.

    Parameters
    ----------
    Mtilde : (L, L) array_like
    pre : PreAssignment, optional
        Forced agents; ``N`` defaults to its column count.
    N : int, optional
        Number of groups.
    max_exact_free : int
        Above this many free agents a greedy plus local-search heuristic
        is used and ``info["gap"]`` reports cost minus the root bound.

    Returns
    -------
    Partition
        Ties are broken by the lexicographically smallest assignment.
    """
    Mt = _square(Mtilde)
    L = Mt.shape[0]
    if pre is None:
        if N is None:
            raise ValueError("either pre or N is required")
        pre = PreAssignment.none(L, N)
    N = pre.Pbar.shape[1] if N is None else int(N)
    if pre.Pbar.shape != (L, N):
        raise DimensionError(f"pre-assignment must be {L}x{N}, got {pre.Pbar.shape}")
    if N < 1 or N > L:
        raise InfeasibleError(f"cannot split {L} agents into {N} nonempty groups",
                              diagnosis={"L": L, "N": N})
    fixed = pre.fixed
    n_free = int(np.sum(fixed < 0))
    empty = int(np.sum(np.bincount(fixed[fixed >= 0], minlength=N) == 0))
    if empty > n_free:
        raise InfeasibleError(
            f"{empty} groups have no pre-assigned agent but only {n_free} agents are free",
            diagnosis={"empty_groups": empty, "free_agents": n_free})
    if n_free > max_exact_free:
        assign, cost = _local_search(Mt, N, fixed)
        root = _Search(Mt, N, fixed).bound(fixed)
        return Partition.from_assign(Mt, assign, N, method="local-search",
                                     gap=max(0.0, cost - root), optimal=False)
    s = _Search(Mt, N, fixed, node_limit)
    assign = s.run()
    if assign is None:
        raise InfeasibleError("no feasible partition found", diagnosis={"nodes": s.nodes})
    return Partition.from_assign(Mt, assign, N, method="branch-and-bound",
                                 nodes=s.nodes, optimal=not s.exhausted)


def enumerate_partitions(Mtilde, pre=None, N=None):
    """Exhaustive reference solver; returns the lexicographically first optimum."""
    Mt = _square(Mtilde)
    L = Mt.shape[0]
    if pre is None:
        pre = PreAssignment.none(L, N)
    N = pre.Pbar.shape[1] if N is None else N
    fixed = pre.fixed
    free = np.flatnonzero(fixed < 0)
    best, best_a = math.inf, None
    for combo in itertools.product(range(N), repeat=free.size):
        a = fixed.copy()
        a[free] = combo
        if np.any(np.bincount(a, minlength=N) == 0):
            continue
        c = _cost(Mt, a, N)
        if c < best - 1e-12 * max(1.0, best if math.isfinite(best) else 1.0):
            best, best_a = c, a
    return best_a, best


# --------------------------------------------------------------------------
# agent certificates


@dataclass
class AgentSpec:
    """Agent ``x' = alpha(x) + beta(x) u + B w`` with output ``C x``.

    ``interface(x, xh, uh)`` returns the concrete input; ``rho`` bounds the
    interface mismatch. ``eps`` defaults to ``|lam + theta| / 2``.
    """

    alpha_fn: Callable
    beta_fn: Callable
    B: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    lam: float
    theta: float
    interface: Callable
    eps: Optional[float] = None
    rho: ParamK = ParamK(0.0, 1)
    jacobian: Optional[Callable] = None
    name: str = ""

    def __post_init__(self):
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if self.eps is None:
            self.eps = abs(self.lam + self.theta) / 2

    @property
    def n(self):
        return self.Q.shape[0]


@dataclass(frozen=True)
class StorageProfile:
    """Agent storage ``1/2 (x - xh)^T Q (x - xh)`` and its rates."""

    Q: np.ndarray
    eta_rate: float
    nu_coeff: float
    rho: ParamK
    delta_fn: Callable
    Xtilde: SupplyRate
    info: dict = field(default_factory=dict, compare=False)

    def V(self, x, xh):
        e = np.atleast_1d(np.asarray(x, dtype=float) - np.asarray(xh, dtype=float))
        return 0.5 * float(e @ self.Q @ e)

    def grad(self, x, xh):
        e = np.atleast_1d(np.asarray(x, dtype=float) - np.asarray(xh, dtype=float))
        g = self.Q @ e
        return g, -g

    @property
    def eta(self):
        return ParamK(self.eta_rate, 1)

    @property
    def nu(self):
        return ParamK(self.nu_coeff, 2)


def _as_fn(v):
    return lambda x: np.atleast_1d(np.asarray(v(x), dtype=float))


def _num_jac(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(f(x))
    J = np.zeros((f0.size, x.size))
    for k in range(x.size):
        s = h * max(1.0, abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += s
        xm[k] -= s
        J[:, k] = (np.atleast_1d(f(xp)) - np.atleast_1d(f(xm))) / (2 * s)
    return J


def _sobol(lo, hi, n, seed):
    lo, hi = np.asarray(lo, dtype=float).reshape(-1), np.asarray(hi, dtype=float).reshape(-1)
    m = max(1, int(math.ceil(math.log2(max(n, 2)))))
    pts = qmc.Sobol(d=lo.size, scramble=True, seed=seed).random_base2(m)[:n]
    return qmc.scale(pts, lo, hi) if np.any(hi > lo) else np.tile(lo, (n, 1))


def agent_storage_profile(spec, nominal, box, u_box=(0.0, 1.0), n_samples=1000,
                          seed=0, tol=1e-9):
    """Verify the agent conditions and return its storage profile.

    The checks are, in order: output coupling ``Q B = C^T``, a strict
    decay margin ``lam + theta < 0`` with ``eps`` inside the admissible
    interval, the Jacobian bound ``Q J + J^T Q <= 2 lam I`` at Sobol
    samples of ``box``, and the interface bound
    ``(x - xh)^T Q (beta_l(x) v - beta(xh) uh) <= theta |x - xh|^2 + rho(|uh|)``
    at samples of ``box x box x u_box``.

    Raises
    ------
    ConditionError
        Naming the failed condition and the worst sample.
    """
    alpha_nom, beta_nom = nominal
    Q = spec.Q
    n = spec.n
    if not np.allclose(Q, Q.T) or np.linalg.eigvalsh(Q)[0] <= 0:
        raise ConditionError("storage-matrix", "Q must be symmetric positive definite")
    gap = float(np.abs(Q @ spec.B - spec.C.T).max())
    if gap > 1e-10:
        raise ConditionError("output-coupling", f"Q B differs from C^T by {gap:.3e}",
                             violation=gap)
    margin = spec.lam + spec.theta
    if not margin < 0:
        raise ConditionError("decay-margin",
                             f"lambda + theta = {margin:.6g} must be negative",
                             violation=margin)
    if not 0 < spec.eps < abs(margin):
        raise ConditionError("decay-margin",
                             f"eps = {spec.eps:.6g} must lie in (0, {abs(margin):.6g})",
                             violation=spec.eps)
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (n,)) for b in box)
    xs = _sobol(lo, hi, n_samples, seed)
    alpha = _as_fn(spec.alpha_fn)
    worst, wpt = -math.inf, None
    for x in xs:
        J = spec.jacobian(x) if spec.jacobian is not None else _num_jac(alpha, x)
        J = np.atleast_2d(J)
        v = float(np.linalg.eigvalsh(Q @ J + J.T @ Q - 2 * spec.lam * np.eye(n))[-1])
        if v > worst:
            worst, wpt = v, x
    # central differences leave O(h^2) noise in J
    jac_tol = (tol if spec.jacobian is not None else 1e-6) * max(1.0, abs(spec.lam))
    if worst > jac_tol:
        raise ConditionError("jacobian", "Q J + J^T Q exceeds 2 lambda I",
                             worst_point=wpt, violation=worst)
    ulo, uhi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in u_box)
    pts = _sobol(np.concatenate([lo, lo, ulo]), np.concatenate([hi, hi, uhi]),
                 n_samples, seed + 1)
    worst, wpt = -math.inf, None
    for z in pts:
        x, xh, uh = z[:n], z[n:2 * n], z[2 * n:]
        u = np.atleast_1d(spec.interface(x, xh, uh))
        e = x - xh
        lhs = float(e @ Q @ (np.atleast_2d(spec.beta_fn(x)) @ u
                            - np.atleast_2d(beta_nom(xh)) @ uh))
        rhs = spec.theta * float(e @ e) + float(spec.rho(np.linalg.norm(uh)))
        v = lhs - rhs
        if v > worst:
            worst, wpt = v, z
    if worst > 1e-9 * max(1.0, abs(spec.theta) * float(np.max(hi - lo)) ** 2):
        raise ConditionError("interface", "interface bound fails at a sample",
                             worst_point=wpt, violation=worst)
    w = np.linalg.eigvalsh(Q)
    scale = 1.0 / (4 * (abs(margin) - spec.eps))
    an = _as_fn(alpha_nom)

    def delta_fn(xh, _a=alpha, _an=an, _Q=Q, _s=scale):
        r = _Q @ (_a(xh) - _an(xh))
        return _s * float(r @ r)

    return StorageProfile(Q=Q.copy(), eta_rate=2 * spec.eps / float(w[-1]),
                          nu_coeff=0.5 * float(w[0]), rho=spec.rho, delta_fn=delta_fn,
                          Xtilde=SupplyRate.passivity(spec.C.shape[0]),
                          info={"lam": spec.lam, "theta": spec.theta, "eps": spec.eps,
                                "delta_scale": scale, "name": spec.name})


class _SumDelta:
    def __init__(self, fns):
        self.fns = list(fns)

    def __call__(self, xh):
        return float(sum(f(xh) for f in self.fns))


def group_subsystem(profiles):
    """Roll agent profiles of one group up into a :class:`SubsystemCert`.

    ``eta_i`` is the smallest agent slope, ``nu_i(s) = s^2 / sum(1/a_l)``
    for agent coefficients ``a_l``, ``rho_i`` and ``Delta_i`` are sums.
    """
    profiles = list(profiles)
    if not profiles:
        raise ValueError("a group needs at least one agent")
    Xt = profiles[0].Xtilde
    p = Xt.dims[0]
    for pr in profiles[1:]:
        if pr.Xtilde.dims != Xt.dims or not np.allclose(pr.Xtilde.matrix, Xt.matrix):
            raise ValueError("profiles in a group must share the supply rate")
    rho_powers = {pr.rho.power for pr in profiles if pr.rho.coeff > 0}
    if len(rho_powers) > 1:
        raise ValueError("mixed exponents in rho cannot be summed in closed form")
    Li = len(profiles)
    I = np.eye(Li)
    X = SupplyRate(np.kron(I, Xt.X11), np.kron(I, Xt.X12),
                   np.kron(I, Xt.X21), np.kron(I, Xt.X22))
    ones = np.kron(np.ones((Li, 1)), np.eye(p))
    eta = ParamK(min(pr.eta_rate for pr in profiles), 1)
    nu = ParamK(1.0 / sum(1.0 / pr.nu_coeff for pr in profiles), 2)
    rho = ParamK(sum(pr.rho.coeff for pr in profiles),
                 rho_powers.pop() if rho_powers else 1)
    return SubsystemCert(W=np.eye(Li * p), W_hat=ones, H=ones.copy(), X=X, nu=nu,
                         eta=eta, rho=rho, delta=_SumDelta(pr.delta_fn for pr in profiles),
                         info={"size": Li})


def to_dot(partition, Mtilde=None, names=None):
    """Graphviz text: one cluster per group, edges from nonzero couplings."""
    L = partition.L
    names = names or [str(l + 1) for l in range(L)]
    lines = ["graph aggregation {"]
    for i, g in enumerate(partition.groups()):
        lines.append(f"  subgraph cluster_{i} {{")
        lines.append(f'    label="group {i + 1}";')
        for l in g:
            lines.append(f'    n{l} [label="{names[l]}"];')
        lines.append("  }")
    if Mtilde is not None:
        Mt = _square(Mtilde)
        for a in range(L):
            for b in range(a + 1, L):
                if Mt[a, b] != 0 or Mt[b, a] != 0:
                    lines.append(f"  n{a} -- n{b};")
    lines.append("}")
    return "\n".join(lines) + "\n"
