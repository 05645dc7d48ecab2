"""Approximate abstractions of linear time-invariant systems.

A concrete plant ``x' = A x + B u, y = C x`` is related to a smaller model
``xh' = Ah xh + Bh uh, yh = Ch xh`` through a lift ``x ~ P xh``. The fit

    A P  ~  P Ah - B Q

is solved in the least-squares sense and leaves a residual
``D = A P - P Ah + B Q``. With the interface

    u = K (x - P xh) + Q xh + R uh

the error ``e = x - P xh`` obeys ``e' = (A + B K) e + W d`` with
``W = [I, B R - P Bh]`` and ``d = (D xh, uh)``. A quadratic storage
``V = e^T U e`` and the gain ``K`` come from a small LMI problem.
"""

from dataclasses import dataclass, field
import math
import warnings
from typing import Optional

import numpy as np

from . import conic
from .conic import (LmiBlock, LmiProblem, SolverOptions, SdpStatus,
                    bisect_feasibility, solve_least_squares, solve_sdp,
                    sym_basis, sym_from_vec)
from .errors import DimensionError, InfeasibleError, NonFiniteError, RankError

__all__ = [
    "LinearSystem",
    "LinearAbstraction",
    "AbstractionCertificate",
    "fit_abstraction",
    "fit_input_map",
    "synth_gain",
    "interface_refine",
    "error_bound",
    "truncation_lift",
    "aggregation_lift",
    "UnstableAbstractionWarning",
]


class UnstableAbstractionWarning(UserWarning):
    """The fitted abstract state matrix has eigenvalues with Re >= 0."""


def _mat(M, name, rows=None, cols=None):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {M.shape}")
    if rows is not None and M.shape[0] != rows:
        raise DimensionError(f"{name} must have {rows} rows, got {M.shape[0]}")
    if cols is not None and M.shape[1] != cols:
        raise DimensionError(f"{name} must have {cols} columns, got {M.shape[1]}")
    if not np.all(np.isfinite(M)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return M


@dataclass(frozen=True)
class LinearSystem:
    """Continuous-time plant ``x' = A x + B u``, ``y = C x``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        A = _mat(self.A, "A")
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionError(f"A must be square, got {A.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", _mat(self.B, "B", rows=n))
        object.__setattr__(self, "C", _mat(self.C, "C", cols=n))

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    def is_stabilizable(self, tol=1e-9):
        """PBH test: ``[A - lam I, B]`` has full row rank for Re(lam) >= 0."""
        n = self.n
        scale = max(1.0, np.linalg.norm(self.A, 2), np.linalg.norm(self.B, 2))
        for lam in np.linalg.eigvals(self.A):
            if lam.real < 0:
                continue
            Mx = np.hstack([self.A - lam * np.eye(n), self.B])
            sv = np.linalg.svd(Mx, compute_uv=False)
            if sv[n - 1] <= tol * scale:
                return False
        return True

    def to_dict(self):
        return {"A": self.A.tolist(), "B": self.B.tolist(), "C": self.C.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["A"], d["B"], d["C"])


@dataclass(frozen=True)
class LinearAbstraction:
    """Abstract model and lift data.

    ``B_hat`` and ``R`` stay ``None`` until :func:`fit_input_map` is applied
    (see :meth:`with_input_map`).
    """

    P: np.ndarray
    A_hat: np.ndarray
    C_hat: np.ndarray
    Q: np.ndarray
    D: np.ndarray
    B_hat: Optional[np.ndarray] = None
    R: Optional[np.ndarray] = None

    @property
    def n_hat(self):
        return self.P.shape[1]

    def with_input_map(self, sys, B_hat):
        """Return a copy with ``B_hat`` set and ``R`` fitted."""
        B_hat = _mat(B_hat, "B_hat", rows=self.n_hat)
        R = fit_input_map(sys, self.P, B_hat)
        return LinearAbstraction(self.P, self.A_hat, self.C_hat, self.Q, self.D,
                                 B_hat, R)

    def disturbance_matrix(self, sys):
        """``W = [I, B R - P B_hat]`` (the second block only if inputs are set)."""
        cols = [np.eye(sys.n)]
        if self.B_hat is not None and self.B_hat.shape[1] > 0:
            cols.append(sys.B @ self.R - self.P @ self.B_hat)
        return np.hstack(cols)

    def to_dict(self):
        out = {k: getattr(self, k).tolist() for k in ("P", "A_hat", "C_hat", "Q", "D")}
        out["B_hat"] = None if self.B_hat is None else self.B_hat.tolist()
        out["R"] = None if self.R is None else self.R.tolist()
        return out

    @classmethod
    def from_dict(cls, d):
        opt = lambda k: None if d.get(k) is None else np.asarray(d[k], dtype=float)
        return cls(*(np.asarray(d[k], dtype=float)
                     for k in ("P", "A_hat", "C_hat", "Q", "D")),
                   B_hat=opt("B_hat"), R=opt("R"))


def fit_abstraction(sys, P):
    """Least-squares abstract dynamics for a given lift.

    Parameters
    ----------
    sys : LinearSystem
    P : array_like, shape (n, n_hat)
        Lift from abstract to concrete states; must have full column rank.

    Returns
    -------
    LinearAbstraction
        ``[A_hat; Q]`` minimizes ``||A P - [P, -B] [A_hat; Q]||_F``,
        ``D`` is the attained residual and ``C_hat = C P``.

    Raises
    ------
    RankError
        If ``P`` is rank deficient.
    """
    P = _mat(P, "P", rows=sys.n)
    sv = np.linalg.svd(P, compute_uv=False)
    if P.shape[1] > sys.n or sv[-1] <= 1e-9 * max(1.0, sv[0]):
        raise RankError(f"P ({P.shape[0]}x{P.shape[1]}) must have full column rank")
    nh = P.shape[1]
    AP = sys.A @ P
    X = solve_least_squares(np.hstack([P, -sys.B]), AP)
    A_hat, Q = X[:nh], X[nh:]
    D = AP - P @ A_hat + sys.B @ Q
    eig = np.linalg.eigvals(A_hat)
    if np.any(eig.real >= 0):
        warnings.warn("fitted abstract dynamics are not Hurwitz "
                      f"(max Re eig {eig.real.max():.3g})",
                      UnstableAbstractionWarning, stacklevel=2)
    return LinearAbstraction(P=P, A_hat=A_hat, C_hat=sys.C @ P, Q=Q, D=D)


def fit_input_map(sys, P, B_hat):
    """``R = argmin ||B R - P B_hat||_F`` (minimum-norm solution)."""
    P = _mat(P, "P", rows=sys.n)
    B_hat = _mat(B_hat, "B_hat", rows=P.shape[1])
    return solve_least_squares(sys.B, P @ B_hat)


@dataclass(frozen=True)
class AbstractionCertificate:
    """Quadratic simulation certificate ``V = (x - P xh)^T U (x - P xh)``.

    Along closed-loop trajectories ``V' <= -alpha V + alpha |uh|^2 +
    alpha |D xh|^2`` and ``nu_coeff |C x - C_hat xh|^2 <= V``.
    """

    U: np.ndarray
    K: np.ndarray
    alpha: float
    beta: float
    nu_coeff: float
    D: np.ndarray
    W: np.ndarray
    P: np.ndarray
    A_cl: np.ndarray
    info: dict = field(default_factory=dict, compare=False)

    @property
    def eta_rate(self):
        return self.alpha

    @property
    def rho_coeff(self):
        return self.alpha

    @property
    def delta_matrix(self):
        return self.D

    @property
    def e_bar(self):
        return 1.0 / math.sqrt(np.linalg.eigvalsh(self.U)[0])

    @property
    def Z(self):
        return np.linalg.inv(self.U)

    @property
    def Y(self):
        return self.K @ self.Z

    def V(self, x, x_hat):
        e = np.asarray(x, dtype=float) - self.P @ np.asarray(x_hat, dtype=float)
        return float(e @ self.U @ e)

    def delta(self, x_hat):
        r = self.D @ np.asarray(x_hat, dtype=float)
        return self.alpha * float(r @ r)

    def lmi_matrix(self, A, B):
        """The synthesis matrix at ``Z = U^-1``, ``Y = K Z``; should be NSD."""
        return _lmi_matrix(A, B, self.W, self.Z, self.Y, self.alpha)

    def to_dict(self):
        return {"U": self.U.tolist(), "K": self.K.tolist(), "alpha": self.alpha,
                "beta": self.beta, "e_bar": self.e_bar, "nu_coeff": self.nu_coeff,
                "eta_rate": self.eta_rate, "rho_coeff": self.rho_coeff,
                "D": self.D.tolist()}


def _lmi_matrix(A, B, W, Z, Y, alpha):
    n, nd = A.shape[0], W.shape[1]
    top = A @ Z + Z @ A.T + B @ Y + Y.T @ B.T + alpha * Z
    X = np.zeros((n + nd, n + nd))
    X[:n, :n] = top
    X[:n, n:] = W
    X[n:, :n] = W.T
    X[n:, n:] = -alpha * np.eye(nd)
    return conic.sym(X)


def _scalar_block(nv, F0, coeffs):
    G = np.zeros((nv, 1, 1))
    for i, v in coeffs.items():
        G[i, 0, 0] = v
    return LmiBlock(np.array([[float(F0)]]), G)


def _opt1_problem(A, B, W, alpha, gain_bound, z_floor, beta_cap=None,
                  cond_eps=1e-6):
    """Synthesis LMI for a fixed alpha.

    Variables are the upper triangle of ``Z``, the entries of ``Y``,
    ``beta``, a floor ``zeta`` with ``Z >= zeta I`` and, when ``beta_cap``
    is given, a level ``tau``. ``||Y|| <= gain_bound zeta`` implies
    ``||K|| <= gain_bound``. Without a cap the objective is ``beta``; with
    one it is ``tau`` subject to ``beta <= beta_cap`` and ``||Y|| <= tau``.
    """
    n, m = B.shape
    nd = W.shape[1]
    E = sym_basis(n)
    nz, ny = len(E), m * n
    second = beta_cap is not None
    ib, iz = nz + ny, nz + ny + 1
    nv = nz + ny + 2 + int(second)
    k1 = n + nd
    F0 = np.zeros((k1, k1))
    F0[:n, n:] = W
    F0[n:, :n] = W.T
    F0[n:, n:] = -alpha * np.eye(nd)
    Fs = np.zeros((nv, k1, k1))
    for i, Ei in enumerate(E):
        Fs[i, :n, :n] = A @ Ei + Ei @ A.T + alpha * Ei
    for a in range(m):
        for b in range(n):
            T = np.outer(B[:, a], np.eye(n)[b])
            Fs[nz + a * n + b, :n, :n] = T + T.T
    blocks = [LmiBlock(F0, Fs)]
    # zeta I <= Z <= beta I
    G = np.zeros((nv, n, n))
    G[:nz] = E
    G[ib] = -np.eye(n)
    blocks.append(LmiBlock(np.zeros((n, n)), G))
    G = np.zeros((nv, n, n))
    G[:nz] = -E
    G[iz] = np.eye(n)
    blocks.append(LmiBlock(np.zeros((n, n)), G))
    # zeta >= cond_eps beta caps cond(Z); zeta >= z_floor fixes a scale
    blocks.append(_scalar_block(nv, 0.0, {ib: cond_eps, iz: -1.0}))
    blocks.append(_scalar_block(nv, z_floor, {iz: -1.0}))
    if m > 0:
        k = m + n
        G = np.zeros((nv, k, k))
        for a in range(m):
            for b in range(n):
                G[nz + a * n + b, a, m + b] = 1.0
                G[nz + a * n + b, m + b, a] = 1.0
        if gain_bound is not None:
            Gk = G.copy()
            Gk[iz] = -gain_bound * np.eye(k)
            blocks.append(LmiBlock(np.zeros((k, k)), Gk))
        if second:
            G[-1] = -np.eye(k)
            blocks.append(LmiBlock(np.zeros((k, k)), G))
    c = np.zeros(nv)
    if second:
        blocks.append(_scalar_block(nv, -beta_cap, {ib: 1.0}))
        c[-1] = 1.0
    else:
        c[ib] = 1.0
    return LmiProblem(nv, c, blocks), nz, ny


def synth_gain(sys, abstraction, alpha_range=(1e-4, 1e4), alpha=None,
               gain_bound=100.0, opts=None, lmi_tol=1e-7, bisect_tol=0.02, W=None,
               gain_slack=1e-3, cond_eps=1e-6):
    """Synthesize ``U`` and ``K`` by minimizing the invariant-ellipsoid size.

    For each trial ``alpha`` the problem

        minimize beta  over Z = U^-1, Y = K Z
        s.t.  [[A Z + Z A^T + B Y + Y^T B^T + alpha Z, W], [W^T, -alpha I]] <= 0
              zeta I <= Z <= beta I,  zeta >= cond_eps beta,
              ||Y|| <= gain_bound zeta

    is solved and ``alpha`` is searched on a log scale. A last solve at the
    chosen ``alpha`` minimizes ``||Y||`` subject to ``beta <= (1 +
    gain_slack) beta*``; the optimal face is often flat in ``Y`` and this
    keeps the gain and the conditioning of ``Z`` moderate.

    Parameters
    ----------
    sys : LinearSystem
    abstraction : LinearAbstraction
    alpha_range : tuple of float
        Search interval for ``alpha``.
    alpha : float, optional
        Fix ``alpha`` instead of searching.
    gain_bound : float or None
        Cap on ``||K||`` (through ``||Y|| <= gain_bound zeta``). The
        infimum of ``beta`` is often approached only with unbounded gain,
        e.g. under full actuation; ``None`` disables the cap.
    opts : SolverOptions, optional
    lmi_tol : float
        Acceptance threshold on the largest eigenvalue of the recomputed
        synthesis matrix.
    cond_eps : float
        Lower bound on ``lambda_min(Z) / lambda_max(Z)`` so that ``U = Z^-1``
        stays well conditioned.
    gain_slack : float
        Relative slack on ``beta`` for the final minimum-gain solve.
    W : array_like, optional
        Override of the disturbance matrix. An all-zero ``W`` makes the
        problem homogeneous in ``Z``; its scale is then fixed by ``Z >= I``.

    Returns
    -------
    AbstractionCertificate

    Raises
    ------
    InfeasibleError
        If no ``alpha`` in the range admits a certificate.
    """
    if not sys.is_stabilizable():
        raise InfeasibleError("(A, B) is not stabilizable")
    opts = opts or SolverOptions()
    A, B, n = sys.A, sys.B, sys.n
    W = abstraction.disturbance_matrix(sys) if W is None else _mat(W, "W", rows=n)
    z_floor = 0.0
    if not np.any(W):
        z_floor = 1.0
        W = np.zeros((n, 0))

    def oracle(a, beta_cap=None):
        prob, nz, ny = _opt1_problem(A, B, W, a, gain_bound, z_floor, beta_cap,
                                     cond_eps)
        sol = solve_sdp(prob, opts)
        # the minimum-gain stage only needs a feasible improvement
        usable = sol.status is SdpStatus.OPTIMAL or (
            beta_cap is not None and sol.status is SdpStatus.MAX_ITER)
        if not usable:
            return False, math.inf, sol
        Z = sym_from_vec(sol.x[:nz], n)
        Y = sol.x[nz:nz + ny].reshape(B.shape[1], n)
        lz = np.linalg.eigvalsh(Z)[0]
        if lz <= 0:
            return False, math.inf, sol
        lmi = np.linalg.eigvalsh(_lmi_matrix(A, B, W, Z, Y, a))[-1]
        if lmi > lmi_tol:
            return False, math.inf, sol
        return True, float(np.linalg.eigvalsh(Z)[-1]), (Z, Y, sol)

    if alpha is not None:
        feas, val, payload = oracle(float(alpha))
        if not feas:
            raise InfeasibleError(f"synthesis LMI infeasible at alpha={alpha}")
        res = conic.BisectionResult(float(alpha), val, payload, 1)
    else:
        try:
            res = bisect_feasibility(alpha_range[0], alpha_range[1], oracle,
                                     tol=bisect_tol)
        except InfeasibleError as exc:
            raise InfeasibleError(
                f"{exc}; no certificate with cond(Z) <= {1.0 / cond_eps:.3g} and "
                f"||K|| <= {gain_bound} (the pair may be nearly "
                "uncontrollable)", diagnosis="synthesis-lmi") from None
    Z, Y, sol = res.payload
    # among ellipsoids within gain_slack of the best, take the smallest gain
    feas, _, payload = oracle(res.alpha, beta_cap=res.value * (1.0 + gain_slack))
    if feas:
        Z, Y, sol = payload
    U = conic.sym(np.linalg.inv(Z))
    K = Y @ np.linalg.inv(Z)
    lu = float(np.linalg.eigvalsh(U)[0])
    cc = float(np.linalg.eigvalsh(sys.C.T @ sys.C)[-1]) if sys.C.size else 0.0
    nu = lu / cc if cc > 0 else math.inf
    return AbstractionCertificate(
        U=U, K=K, alpha=res.alpha, beta=float(np.linalg.eigvalsh(Z)[-1]),
        nu_coeff=nu, D=abstraction.D, W=W, P=abstraction.P, A_cl=A + B @ K,
        info={"evaluations": res.evaluations, "iterations": sol.iterations,
              "max_constraint_eig": sol.max_constraint_eig})


def interface_refine(x, x_hat, u_hat, abstraction, cert):
    """``u = K (x - P xh) + Q xh + R uh``."""
    x = np.asarray(x, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    u = cert.K @ (x - abstraction.P @ x_hat) + abstraction.Q @ x_hat
    if abstraction.R is not None and abstraction.R.shape[1] > 0:
        u = u + abstraction.R @ np.asarray(u_hat, dtype=float).reshape(-1)
    return u


def error_bound(cert, V0, u_hat_sup, Dx_hat_sup, t):
    """Output-error bound from the comparison lemma.

    ``v(t) = exp(-alpha t) V0 + (1 - exp(-alpha t)) (u^2 + d^2)`` bounds
    ``V`` and the output error is at most ``sqrt(v(t) / nu_coeff)``.
    """
    if V0 < 0 or u_hat_sup < 0 or Dx_hat_sup < 0:
        raise ValueError("V0 and the sup norms must be nonnegative")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be nonnegative")
    decay = np.exp(-cert.alpha * t)
    v = decay * V0 + (1.0 - decay) * (u_hat_sup ** 2 + Dx_hat_sup ** 2)
    out = np.sqrt(v / cert.nu_coeff)
    return float(out) if out.ndim == 0 else out


def truncation_lift(n, n_hat):
    """``P = [I; 0]`` keeping the first ``n_hat`` states."""
    if not 0 < n_hat <= n:
        raise DimensionError("need 0 < n_hat <= n")
    return np.eye(n)[:, :n_hat]


def aggregation_lift(assign, N=None, p=1):
    """``P (x) I_p`` for a group assignment vector."""
    from .aggregation import partition_matrix
    return np.kron(partition_matrix(assign, N), np.eye(p))
