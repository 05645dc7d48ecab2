"""Compositional certificates for interconnected subsystems.

Each subsystem ``i`` carries a storage function with supply rate

    [W_i w_i - What_i what_i; h2_i - H_i hh2_i]^T X_i [ ... ]

and the interconnection is ``w = M h2``. After fitting the abstract
coupling ``Mhat`` the residual ``Y = W M H - What Mhat`` is absorbed by a
matrix ``Z >= 0`` with

    Q(Z, mu) = G^T X(mu_1 X_1, ..., mu_N X_N) G - diag(Z, 0) <= 0,
    G = [[Y, W M], [0, I]],

and the slack of the composed certificate is ``hh2^T Z hh2 + sum mu_i
Delta_i``.
"""

from dataclasses import dataclass, field
import math
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
import scipy.linalg

from .conic import (LmiBlock, LmiProblem, SolverOptions, solve_least_squares,
                    solve_sdp, sym, sym_basis, sym_from_vec)
from .errors import DimensionError, InfeasibleError, NonFiniteError

__all__ = [
    "RANK_TOL",
    "ParamK",
    "SupplyRate",
    "QuadraticDelta",
    "SubsystemCert",
    "ComposedCert",
    "GlobalData",
    "CouplingFit",
    "ExistsResult",
    "DissipationReport",
    "assemble_global",
    "fit_coupling",
    "q_matrix",
    "solve_relaxed",
    "delta_global",
    "exists_Z",
    "null_space_condition",
    "minimal_Z",
    "check_dissipation_samples",
]

# Relative level below which an eigenvalue counts as zero. The existence
# test and the closed-form refinement in the solver share it so that both
# draw the same line on nearly singular couplings.
RANK_TOL = 1e-6


@dataclass(frozen=True)
class ParamK:
    """Class-K function ``s -> coeff * s**power`` with ``power`` in {1, 2}.

    ``coeff = 0`` is allowed and stands for the zero function.
    """

    coeff: float
    power: int = 1

    def __post_init__(self):
        if self.power not in (1, 2):
            raise ValueError(f"power must be 1 or 2, got {self.power}")
        if not (self.coeff >= 0 and math.isfinite(self.coeff)):
            raise ValueError(f"coeff must be finite and >= 0, got {self.coeff}")

    def __call__(self, s):
        return self.coeff * np.asarray(s, dtype=float) ** self.power

    def to_dict(self):
        return {"coeff": self.coeff, "power": self.power}


@dataclass(frozen=True)
class SupplyRate:
    """Blocks of a symmetric supply-rate matrix ``[[X11, X12], [X21, X22]]``."""

    X11: np.ndarray
    X12: np.ndarray
    X21: np.ndarray
    X22: np.ndarray

    def __post_init__(self):
        blocks = [np.atleast_2d(np.asarray(b, dtype=float))
                  for b in (self.X11, self.X12, self.X21, self.X22)]
        X11, X12, X21, X22 = blocks
        d1, d2 = X11.shape[0], X22.shape[0]
        if X11.shape != (d1, d1) or X22.shape != (d2, d2):
            raise DimensionError("X11 and X22 must be square")
        if X12.shape != (d1, d2) or X21.shape != (d2, d1):
            raise DimensionError("X12/X21 shapes do not match X11/X22")
        if not np.allclose(X21, X12.T, atol=1e-12) or not (
                np.allclose(X11, X11.T, atol=1e-12) and np.allclose(X22, X22.T, atol=1e-12)):
            raise ValueError("supply-rate matrix must be symmetric")
        for name, b in zip(("X11", "X12", "X21", "X22"), blocks):
            object.__setattr__(self, name, b)

    @classmethod
    def from_matrix(cls, X, d1):
        X = np.asarray(X, dtype=float)
        return cls(X[:d1, :d1], X[:d1, d1:], X[d1:, :d1], X[d1:, d1:])

    @classmethod
    def passivity(cls, d):
        """``1/2 [[0, I], [I, 0]]`` of size ``2 d``."""
        I = np.eye(d)
        Z = np.zeros((d, d))
        return cls(Z, 0.5 * I, 0.5 * I, Z.copy())

    @property
    def dims(self):
        return self.X11.shape[0], self.X22.shape[0]

    @property
    def matrix(self):
        return np.block([[self.X11, self.X12], [self.X21, self.X22]])

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("X11", "X12", "X21", "X22")}


@dataclass(frozen=True)
class QuadraticDelta:
    """``Delta(y) = y^T M y`` for a symmetric PSD ``M``."""

    M: np.ndarray

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        if M.shape[0] != M.shape[1]:
            raise DimensionError("QuadraticDelta matrix must be square")
        object.__setattr__(self, "M", sym(M))

    def __call__(self, y):
        y = np.asarray(y, dtype=float).reshape(-1)
        return float(y @ self.M @ y)


@dataclass(frozen=True)
class SubsystemCert:
    """Practical storage data of one subsystem.

    ``delta`` maps the abstract state (or internal output) to the slack
    ``Delta_i >= 0``; it may be a :class:`QuadraticDelta`, any callable or
    ``None`` for the zero function.
    """

    W: np.ndarray
    W_hat: np.ndarray
    H: np.ndarray
    X: SupplyRate
    nu: ParamK
    eta: ParamK
    rho: ParamK
    delta: Optional[Callable] = None
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for k in ("W", "W_hat", "H"):
            object.__setattr__(self, k, np.atleast_2d(np.asarray(getattr(self, k), dtype=float)))
        d1, d2 = self.X.dims
        if self.W.shape[0] != d1 or self.W_hat.shape[0] != d1:
            raise DimensionError(
                f"W and W_hat need {d1} rows to match X11, got "
                f"{self.W.shape[0]} and {self.W_hat.shape[0]}")
        if self.H.shape[0] != d2:
            raise DimensionError(f"H needs {d2} rows to match X22, got {self.H.shape[0]}")

    def delta_value(self, z):
        return 0.0 if self.delta is None else float(self.delta(z))

    def to_dict(self):
        d = {"W": self.W.tolist(), "W_hat": self.W_hat.tolist(), "H": self.H.tolist(),
             "X": self.X.to_dict(), "nu": self.nu.to_dict(), "eta": self.eta.to_dict(),
             "rho": self.rho.to_dict()}
        if isinstance(self.delta, QuadraticDelta):
            d["delta_matrix"] = self.delta.M.tolist()
        d.update({k: v for k, v in self.info.items() if _jsonable(v)})
        return d


def _jsonable(v):
    return isinstance(v, (int, float, str, bool, list)) or v is None


class GlobalData(NamedTuple):
    W: np.ndarray
    W_hat: np.ndarray
    H: np.ndarray
    X: np.ndarray


def _global_X(certs, mu):
    d1 = [c.X.dims[0] for c in certs]
    d2 = [c.X.dims[1] for c in certs]
    n1, n2 = sum(d1), sum(d2)
    X = np.zeros((n1 + n2, n1 + n2))
    o1 = np.concatenate([[0], np.cumsum(d1)]).astype(int)
    o2 = n1 + np.concatenate([[0], np.cumsum(d2)]).astype(int)
    for i, c in enumerate(certs):
        r1 = slice(o1[i], o1[i + 1])
        r2 = slice(o2[i], o2[i + 1])
        X[r1, r1] = mu[i] * c.X.X11
        X[r1, r2] = mu[i] * c.X.X12
        X[r2, r1] = mu[i] * c.X.X21
        X[r2, r2] = mu[i] * c.X.X22
    return X


def assemble_global(certs, mu):
    """Block-diagonal ``W, What, H`` and the interleaved supply rate.

    The global ``X`` lists all ``X11`` blocks first and all ``X22`` blocks
    after, each scaled by its ``mu_i``.
    """
    certs = list(certs)
    mu = np.asarray(mu, dtype=float).reshape(-1)
    if len(mu) != len(certs):
        raise DimensionError(f"{len(mu)} weights for {len(certs)} subsystems")
    if not np.all(mu > 0):
        raise ValueError("weights mu must be positive")
    return GlobalData(
        W=scipy.linalg.block_diag(*[c.W for c in certs]),
        W_hat=scipy.linalg.block_diag(*[c.W_hat for c in certs]),
        H=scipy.linalg.block_diag(*[c.H for c in certs]),
        X=_global_X(certs, mu),
    )


class CouplingFit(NamedTuple):
    Mhat: np.ndarray
    Y: np.ndarray


def fit_coupling(W, M, H, W_hat):
    """``Mhat = argmin ||W M H - What Mhat||_F`` and its residual ``Y``."""
    W, M, H, W_hat = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (W, M, H, W_hat))
    if W.shape[1] != M.shape[0] or M.shape[1] != H.shape[0]:
        raise DimensionError(
            f"W {W.shape}, M {M.shape}, H {H.shape} cannot be multiplied")
    target = W @ M @ H
    Mhat = solve_least_squares(W_hat, target)
    return CouplingFit(Mhat, target - W_hat @ Mhat)


def _gmatrix(Y, W, M):
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    WM = np.atleast_2d(np.asarray(W, dtype=float)) @ np.atleast_2d(np.asarray(M, dtype=float))
    if WM.shape[0] != Y.shape[0]:
        raise DimensionError(f"Y has {Y.shape[0]} rows but W M has {WM.shape[0]}")
    q = WM.shape[1]
    qh = Y.shape[1]
    G = np.zeros((Y.shape[0] + q, qh + q))
    G[:Y.shape[0], :qh] = Y
    G[:Y.shape[0], qh:] = WM
    G[Y.shape[0]:, qh:] = np.eye(q)
    return G, qh, q


def _subsystem_terms(Y, W, M, certs):
    """``G^T Xbar_i G`` for each subsystem with unit weight."""
    G, qh, q = _gmatrix(Y, W, M)
    certs = list(certs)
    d1 = sum(c.X.dims[0] for c in certs)
    d2 = sum(c.X.dims[1] for c in certs)
    if G.shape[0] != d1 + d2:
        raise DimensionError(
            f"supply rates cover {d1}+{d2} signals but G has {G.shape[0]} rows")
    terms = []
    for i in range(len(certs)):
        e = np.zeros(len(certs))
        e[i] = 1.0
        terms.append(sym(G.T @ _global_X(certs, e) @ G))
    return terms, qh, q


def q_matrix(Y, W, M, certs, Z, mu):
    """``Q(Z, mu)``; symmetric by construction."""
    terms, qh, q = _subsystem_terms(Y, W, M, certs)
    Q = sum(m_i * T for m_i, T in zip(np.asarray(mu, dtype=float), terms))
    Q = Q.copy()
    Q[:qh, :qh] -= np.asarray(Z, dtype=float)
    return sym(Q)


class NullSpaceCheck(NamedTuple):
    holds: bool
    max_eig_q22: float
    violation: float
    null_basis: np.ndarray


def null_space_condition(Q12, Q22, null_tol=1e-9, tol=1e-8):
    """Whether ``[[-Z, Q12], [Q12^T, Q22]] <= 0`` is solvable in ``Z``.

    That holds iff ``Q22 <= 0`` and every null vector of ``Q22`` is
    annihilated by ``Q12``; ``Z`` can then absorb the rest.
    """
    Q22 = sym(Q22)
    w, V = np.linalg.eigh(Q22)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    nullv = V[:, np.abs(w) <= null_tol * scale]
    viol = float(np.abs(np.asarray(Q12) @ nullv).max(initial=0.0))
    top = float(w[-1]) if len(w) else -math.inf
    holds = top <= null_tol * scale and viol <= tol
    return NullSpaceCheck(holds, top, viol, nullv)


@dataclass(frozen=True)
class ComposedCert:
    """Result of the relaxed composition problem."""

    mu: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    Mhat: Optional[np.ndarray]
    W: np.ndarray
    M: np.ndarray
    X: np.ndarray
    Q: np.ndarray
    objective: float
    subsystems: Sequence[SubsystemCert] = ()
    info: dict = field(default_factory=dict, compare=False)

    @property
    def q_eigenvalues(self):
        return np.linalg.eigvalsh(self.Q)

    @property
    def max_q_eig(self):
        return float(self.q_eigenvalues[-1])

    def to_dict(self):
        return {"mu": self.mu.tolist(), "Z": self.Z.tolist(), "Y": self.Y.tolist(),
                "Mhat": None if self.Mhat is None else self.Mhat.tolist(),
                "objective": self.objective, "trace_Z": float(np.trace(self.Z)),
                "max_q_eig": self.max_q_eig,
                "subsystems": [c.to_dict() for c in self.subsystems]}


def _scaling_vector(S, certs, qh):
    if S is None:
        return np.ones(qh)
    S = np.asarray(S, dtype=float)
    if S.ndim == 2:
        if not np.allclose(S, np.diag(np.diag(S))):
            raise ValueError("S must be diagonal")
        S = np.diag(S)
    if S.shape[0] == len(certs) and S.shape[0] != qh:
        S = np.concatenate([np.full(c.H.shape[1], s) for c, s in zip(certs, S)])
    if S.shape[0] != qh:
        raise DimensionError(f"S must have {qh} diagonal entries or one per subsystem")
    if np.any(S == 0) or not np.all(np.isfinite(S)):
        raise ValueError("S must be invertible")
    return S


def solve_relaxed(Y, W, M, certs, S=None, r=None, pin_mu=False, z_cap=1e6,
                  opts=None, Mhat=None, eig_tol=1e-7, refine_tol=RANK_TOL):
    """Minimize ``tr(S^-T Z S^-1) + sum mu_i / r_i`` subject to ``Q(Z, mu) <= 0``.

    Parameters
    ----------
    Y, W, M : array_like
        Coupling residual, block-diagonal ``W`` and the interconnection.
    certs : sequence of SubsystemCert
        Source of the supply rates ``X_i``.
    S : array_like, optional
        Diagonal output scaling, either per subsystem or per entry of ``Z``.
    r : array_like, optional
        Positive weights for the ``mu_i``; ones by default.
    pin_mu : bool
        Fix every ``mu_i`` to one.
    z_cap : float
        Upper bound on ``tr(Z)``. Without it an instance violating the
        null-space condition is only infeasible in the limit ``Z -> inf``.

    The SDP supplies the weights ``mu``; for fixed weights the
    PSD-minimal ``Z`` is then recovered in closed form (see
    :func:`minimal_Z`) and checked against ``eig_tol`` relative to the
    size of ``Q``. Trying ``mu = 1`` as a fallback keeps a feasible
    instance from being rejected because of an inexact ``mu``.

    Returns
    -------
    ComposedCert

    Raises
    ------
    InfeasibleError
        With a ``diagnosis`` dict describing the null-space check at
        ``mu = 1`` when no feasible ``(Z, mu)`` is found.
    """
    certs = list(certs)
    N = len(certs)
    terms, qh, q = _subsystem_terms(Y, W, M, certs)
    s = _scaling_vector(S, certs, qh)
    r = np.ones(N) if r is None else np.asarray(r, dtype=float).reshape(-1)
    if r.shape[0] != N or np.any(r <= 0):
        raise ValueError("r must hold one positive weight per subsystem")
    opts = opts or SolverOptions()

    E = sym_basis(qh) if qh else np.zeros((0, 0, 0))
    nz = len(E)
    nm = 0 if pin_mu else N
    nv = nz + nm
    k = qh + q
    F0 = sum(terms) if pin_mu else np.zeros((k, k))
    Fs = np.zeros((nv, k, k))
    Fs[:nz, :qh, :qh] = -E
    for i in range(nm):
        Fs[nz + i] = terms[i]
    blocks = [LmiBlock(F0, Fs)]
    if nz:
        G = np.zeros((nv, qh, qh))
        G[:nz] = -E
        blocks.append(LmiBlock(np.zeros((qh, qh)), G))
        G = np.zeros((nv, 1, 1))
        G[:nz, 0, 0] = np.einsum("kaa->k", E)
        blocks.append(LmiBlock(np.array([[-float(z_cap)]]), G))
    inv_s2 = 1.0 / s ** 2
    c = np.zeros(nv)
    c[:nz] = np.einsum("kaa,a->k", E, inv_s2)
    c[nz:] = 1.0 / r[:nm]
    lb = None
    x0 = np.zeros(nv)
    if nz:
        x0[:nz] = np.where(np.einsum("kaa->k", E) > 0, 1.0, 0.0)
    if nm:
        lb = np.concatenate([np.full(nz, -np.inf), np.ones(nm)])
        x0[nz:] = 2.0
    prob = LmiProblem(nv, c, blocks, lb)
    sol = solve_sdp(prob, SolverOptions(**{**opts.__dict__, "x0": x0}))

    mu_sdp = np.ones(N) if pin_mu else np.maximum(sol.x[nz:], 1.0)
    candidates = [mu_sdp] if pin_mu else [mu_sdp, np.ones(N)]
    best = None
    checks = []
    for mu in candidates:
        Q0 = q_matrix(Y, W, M, certs, np.zeros((qh, qh)), mu)
        Z, chk = minimal_Z(Q0, qh, null_tol=refine_tol)
        checks.append(chk)
        if Z is None:
            continue
        Q = q_matrix(Y, W, M, certs, Z, mu)
        scale = max(1.0, float(np.abs(Q0).max(initial=0.0)))
        qmax = float(np.linalg.eigvalsh(Q)[-1]) if k else -math.inf
        if qmax > eig_tol * scale:
            continue
        obj = float(np.sum(np.diag(Z) * inv_s2) + np.sum(mu / r))
        if best is None or obj < best[0]:
            best = (obj, mu, Z, Q)
    if best is None:
        chk = checks[-1]
        diag = {"condition": "null-space", "holds_at_unit_mu": bool(chk.holds),
                "max_eig_Q22": chk.max_eig_q22, "violation": chk.violation,
                "solver_status": sol.status.value, "solver_message": sol.message}
        if not chk.holds:
            msg = ("no Z >= 0 exists: the internal-output block of Q is not "
                   "negative semidefinite or its null space is not annihilated "
                   f"by the residual (violation {chk.violation:.3e}, "
                   f"max eig {chk.max_eig_q22:.3e})")
        else:
            msg = f"relaxed composition LMI not solved ({sol.status.value}: {sol.message})"
        raise InfeasibleError(msg, diagnosis=diag)
    objective, mu, Z, Q = best
    Z_sdp = sym_from_vec(sol.x[:nz], qh) if nz else np.zeros((0, 0))
    return ComposedCert(mu=mu, Z=Z, Y=np.atleast_2d(np.asarray(Y, dtype=float)),
                        Mhat=Mhat, W=np.asarray(W, dtype=float),
                        M=np.asarray(M, dtype=float), X=_global_X(certs, mu), Q=Q,
                        objective=objective, subsystems=tuple(certs),
                        info={"iterations": sol.iterations,
                              "solver_status": sol.status.value,
                              "sdp_trace_Z": float(np.trace(Z_sdp)),
                              "sdp_objective": float(c @ sol.x) + (float(N) if pin_mu else 0.0),
                              "pin_mu": bool(pin_mu)})


def minimal_Z(Q0, qh, null_tol=RANK_TOL):
    """Smallest ``Z`` (in the PSD order) with ``Q0 - diag(Z, 0) <= 0``.

    With ``Q0 = [[Q11, Q12], [Q12^T, Q22]]`` and ``Q11 = 0`` the answer is
    ``Z = Q12 (-Q22)^+ Q12^T`` whenever the null-space condition holds,
    and ``None`` otherwise. ``Q11`` itself is added when nonzero.
    """
    Q0 = sym(np.asarray(Q0, dtype=float))
    Q11, Q12, Q22 = Q0[:qh, :qh], Q0[:qh, qh:], Q0[qh:, qh:]
    scale = max(1.0, float(np.abs(Q0).max(initial=0.0)))
    chk = null_space_condition(Q12, Q22, null_tol=null_tol, tol=null_tol * scale)
    if not chk.holds:
        return None, chk
    w, V = np.linalg.eigh(-Q22)
    keep = w > null_tol * max(1.0, float(np.abs(w).max(initial=0.0)))
    R = Q12 @ V[:, keep]
    Z = sym(R @ np.diag(1.0 / w[keep]) @ R.T + Q11)
    # Q11 may carry indefinite parts; lift to the PSD cone if needed
    ev, U = np.linalg.eigh(Z)
    if ev.size and ev[0] < 0:
        Z = sym(U @ np.diag(np.maximum(ev, 0.0)) @ U.T)
    return Z, chk


def delta_global(cert, h2hat_values, delta_i_values):
    """``hh2^T Z hh2 + sum mu_i Delta_i``."""
    h = np.asarray(h2hat_values, dtype=float).reshape(-1)
    d = np.asarray(delta_i_values, dtype=float).reshape(-1)
    Z = np.asarray(cert.Z, dtype=float)
    if h.shape[0] != Z.shape[0]:
        raise DimensionError(f"expected {Z.shape[0]} internal outputs, got {h.shape[0]}")
    if d.shape[0] != len(cert.mu):
        raise DimensionError(f"expected {len(cert.mu)} slack values, got {d.shape[0]}")
    if np.any(d < 0):
        raise ValueError("subsystem slacks must be nonnegative")
    val = float(h @ Z @ h + np.dot(cert.mu, d))
    # Z is PSD up to solver tolerance; clip the rounding
    return max(val, 0.0)


class ExistsResult(NamedTuple):
    exists: bool
    Z: Optional[np.ndarray]
    null_basis: np.ndarray
    violation: float

    def __bool__(self):
        return self.exists


def exists_Z(Mtilde, Ybar, null_tol=RANK_TOL, tol=None):
    """Decide whether some ``Z >= 0`` absorbs the aggregation residual.

    For the passivity supply rate the composition matrix is
    ``[[-Z, Ybar^T / 2], [Ybar / 2, (Mt + Mt^T) / 2]]``, solvable iff the
    null space of ``Mt + Mt^T`` lies in the null space of ``Ybar^T``.
    A witness is ``Z = B B^T / phi`` with ``B = Ybar^T / 2`` and ``phi``
    the smallest nonzero eigenvalue of ``-(Mt + Mt^T) / 2``.

    Eigenvalues within ``null_tol`` (relative) of zero count as null;
    ``tol`` bounds ``|Ybar^T v|`` on null vectors and defaults to the level
    :func:`minimal_Z` applies to the same matrix.

    Raises
    ------
    ValueError
        If ``Mt + Mt^T`` has a positive eigenvalue.
    """
    Mt = np.atleast_2d(np.asarray(Mtilde, dtype=float))
    Yb = np.atleast_2d(np.asarray(Ybar, dtype=float))
    if Mt.shape[0] != Mt.shape[1] or Yb.shape[0] != Mt.shape[0]:
        raise DimensionError(f"Mtilde {Mt.shape} and Ybar {Yb.shape} do not match")
    if not (np.all(np.isfinite(Mt)) and np.all(np.isfinite(Yb))):
        raise NonFiniteError("non-finite input")
    C = 0.5 * (Mt + Mt.T)
    w, V = np.linalg.eigh(C)
    scale = max(1.0, float(np.abs(w).max()))
    if w[-1] > null_tol * scale:
        raise ValueError(
            f"Mtilde + Mtilde^T must be negative semidefinite (max eig {2 * w[-1]:.3e})")
    null = np.abs(w) <= null_tol * scale
    nullv = V[:, null]
    if tol is None:
        qscale = max(1.0, float(np.abs(C).max()), 0.5 * float(np.abs(Yb).max(initial=0.0)))
        tol = 2.0 * null_tol * qscale
    viol = float(np.abs(Yb.T @ nullv).max(initial=0.0))
    if viol > tol:
        return ExistsResult(False, None, nullv, viol)
    B = 0.5 * Yb.T
    nz = -w[~null]
    if len(nz) == 0:
        return ExistsResult(True, np.zeros((Yb.shape[1], Yb.shape[1])), nullv, viol)
    phi = float(nz.min())
    return ExistsResult(True, sym(B @ B.T / phi), nullv, viol)


@dataclass
class DissipationReport:
    max_violation: float
    worst_point: Optional[np.ndarray]
    passed: bool
    n_samples: int
    tol: float
    nonfinite_point: Optional[np.ndarray] = None

    def to_dict(self):
        arr = lambda a: None if a is None else np.asarray(a).tolist()
        return {"max_violation": self.max_violation, "worst_point": arr(self.worst_point),
                "passed": self.passed, "n_samples": self.n_samples, "tol": self.tol,
                "nonfinite_point": arr(self.nonfinite_point)}


def _central_grad(V, x, xh, h=1e-6):
    gx = np.zeros_like(x)
    gxh = np.zeros_like(xh)
    for arr, g, first in ((x, gx, True), (xh, gxh, False)):
        for k in range(arr.shape[0]):
            step = h * max(1.0, abs(arr[k]))
            a = arr.copy()
            a[k] += step
            vp = V(a, xh) if first else V(x, a)
            a[k] -= 2 * step
            vm = V(a, xh) if first else V(x, a)
            g[k] = (vp - vm) / (2 * step)
    return gx, gxh


def check_dissipation_samples(f, f_hat, V, rhs_bound, box, n, n_hat,
                              n_samples=10_000, tol=1e-9, grad=None, seed=0):
    """Sample ``dV/dx f + dV/dxh f_hat - rhs`` over a box.

    Sample points are ``z = (x, xh, extra)`` where ``extra`` collects any
    further arguments (abstract input, internal inputs). The functions are
    called as ``f(x, xh, extra)``, ``f_hat(xh, extra)``, ``V(x, xh)`` and
    ``rhs_bound(x, xh, extra)``; ``grad(x, xh)`` returns the two partial
    gradients of ``V`` and defaults to central differences.

    Parameters
    ----------
    box : (lo, hi) pair of array_like
        Bounds for every coordinate of ``z``.

    Returns
    -------
    DissipationReport
        ``passed`` iff the largest violation is at most ``tol`` and all
        samples gave finite values. The box corners and center are always
        included.
    """
    lo, hi = (np.asarray(b, dtype=float).reshape(-1) for b in box)
    if lo.shape != hi.shape or np.any(hi < lo):
        raise ValueError("box must be a (lo, hi) pair with lo <= hi")
    d = lo.shape[0]
    if d < n + n_hat:
        raise DimensionError("box has fewer coordinates than n + n_hat")
    rng = np.random.default_rng(seed)
    pts = lo + (hi - lo) * rng.random((n_samples, d))
    extra_pts = [0.5 * (lo + hi)]
    if d <= 10:
        corners = np.array(np.meshgrid(*[[0.0, 1.0]] * d, indexing="ij")).reshape(d, -1).T
        extra_pts.extend(lo + (hi - lo) * corners)
    pts = np.vstack([np.array(extra_pts), pts])
    worst, worst_z, bad = -math.inf, None, None
    for z in pts:
        x, xh, ex = z[:n], z[n:n + n_hat], z[n + n_hat:]
        gx, gxh = grad(x, xh) if grad is not None else _central_grad(V, x, xh)
        lhs = float(np.dot(gx, f(x, xh, ex)) + np.dot(gxh, f_hat(xh, ex)))
        val = lhs - float(rhs_bound(x, xh, ex))
        if not math.isfinite(val):
            bad = z.copy() if bad is None else bad
            continue
        if val > worst:
            worst, worst_z = val, z.copy()
    return DissipationReport(worst, worst_z, bool(worst <= tol and bad is None),
                             len(pts), tol, bad)
