"""Ring of heated rooms: network, certificates, simulation and monitoring.

Room ``l`` follows

    x_l' = a_l (Te - x_l) + b_l (Th - x_l) u_l + gamma (Mt x)_l

with ``Mt`` the cycle Laplacian. Each group ``i`` of rooms is represented
by one aggregate room with the nominal (mean) coefficients and coupling
``gamma (Mbar xh)_i``. The concrete input is produced from the aggregate
input by the interface

    u_l = (b (Th - xh) uh - k_l (x_l - xh)) / (b_l (Th - x_l)).
"""

from dataclasses import asdict, dataclass, field, fields
import math
from typing import Optional, Sequence

import numpy as np

from .aggregation import (AgentSpec, Partition, StorageProfile, agent_storage_profile,
                          group_subsystem)
from .compose import (ComposedCert, ParamK, assemble_global, exists_Z, fit_coupling,
                      solve_relaxed)
from .errors import GuardError, NonFiniteError
from .rng import Rng

__all__ = [
    "ThermalParams",
    "ThermalNetwork",
    "circle_laplacian",
    "build_network",
    "thermal_interface",
    "aggregate_initial",
    "room_spec",
    "thermal_profiles",
    "ThermalCertificate",
    "thermal_certificate",
    "ControllerConfig",
    "Trajectories",
    "simulate",
    "MonitorReport",
    "monitor",
    "trajectory_table",
]


@dataclass(frozen=True)
class ThermalParams:
    """Parameter distributions and physical constants (minutes, deg C)."""

    a_mean: float = 0.005
    a_std: float = 0.0015
    b_mean: float = 0.035
    b_std: float = 0.0075
    x0_mean: float = 18.0
    x0_std: float = 0.15
    gamma: float = 0.0625
    Te: float = 10.0
    Th: float = 50.0
    k: float = 2.5
    guard: float = 5.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and math.isfinite(v)):
                raise ValueError(f"{f.name} must be a finite number, got {v!r}")
        if min(self.a_std, self.b_std, self.x0_std) < 0:
            raise ValueError("standard deviations must be nonnegative")
        if self.a_mean <= 0 or self.b_mean <= 0 or self.gamma <= 0:
            raise ValueError("a_mean, b_mean and gamma must be positive")
        if self.k < 0 or self.guard <= 0:
            raise ValueError("k must be nonnegative and guard positive")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise ValueError(f"unknown thermal parameters: {', '.join(bad)}")
        return cls(**{k: float(v) for k, v in d.items()})

    def to_dict(self):
        return asdict(self)


def circle_laplacian(L):
    """``-2`` on the diagonal, ``1`` for the two cyclic neighbors."""
    if L < 3:
        raise ValueError("a ring needs at least 3 rooms")
    M = -2.0 * np.eye(L)
    idx = np.arange(L)
    M[idx, (idx + 1) % L] = 1.0
    M[idx, (idx - 1) % L] = 1.0
    return M


@dataclass(frozen=True)
class ThermalNetwork:
    L: int
    a: np.ndarray
    b: np.ndarray
    gamma: float
    Te: float
    Th: float
    Mtilde: np.ndarray
    x0: np.ndarray
    k: np.ndarray
    guard: float = 5.0
    seed: Optional[int] = None

    @property
    def a_nom(self):
        return float(np.mean(self.a))

    @property
    def b_nom(self):
        return float(np.mean(self.b))

    def to_dict(self):
        return {"L": self.L, "a": self.a.tolist(), "b": self.b.tolist(), "gamma": self.gamma,
                "Te": self.Te, "Th": self.Th, "x0": self.x0.tolist(), "k": self.k.tolist(),
                "guard": self.guard, "seed": self.seed,
                "a_nominal": self.a_nom, "b_nominal": self.b_nom}


def build_network(L, seed=0, params=None):
    """Sample a ring of ``L`` rooms.

    Draw order is fixed: all ``a_l``, then all ``b_l``, then all initial
    temperatures, each coefficient redrawn until positive.
    """
    if isinstance(params, dict):
        params = ThermalParams.from_dict(params)
    p = params or ThermalParams()
    L = int(L)
    if L < 3:
        raise ValueError("a ring needs at least 3 rooms")
    rng = Rng(seed)
    a = np.array([rng.positive_normal(p.a_mean, p.a_std) for _ in range(L)])
    b = np.array([rng.positive_normal(p.b_mean, p.b_std) for _ in range(L)])
    x0 = np.array([rng.normal(p.x0_mean, p.x0_std) for _ in range(L)])
    return ThermalNetwork(L=L, a=a, b=b, gamma=p.gamma, Te=p.Te, Th=p.Th,
                          Mtilde=circle_laplacian(L), x0=x0, k=np.full(L, p.k),
                          guard=p.guard, seed=int(seed))


def thermal_interface(x, xh, uh, b_l, k_l, b, Th, guard=5.0):
    """Concrete heater input from the aggregate one (vectorized).

    Raises
    ------
    GuardError
        If some ``|Th - x| < guard``.
    """
    x = np.asarray(x, dtype=float)
    gap = Th - x
    if np.any(np.abs(gap) < guard):
        worst = x.flat[int(np.argmin(np.abs(gap)))] if gap.ndim else float(x)
        raise GuardError(f"room temperature {worst:.4f} within {guard} of heater "
                         f"temperature {Th}")
    return (b * (Th - np.asarray(xh, dtype=float)) * uh - k_l * (x - xh)) / (b_l * gap)


def aggregate_initial(net, partition):
    """Group means of the initial room temperatures."""
    P = partition.P
    return (P.T @ net.x0) / P.sum(axis=0)


def room_spec(net, l):
    """Agent description of room ``l`` together with its nominal pair."""
    a_l, b_l, k_l = float(net.a[l]), float(net.b[l]), float(net.k[l])
    g, Te, Th, b = net.gamma, net.Te, net.Th, net.b_nom

    def interface(x, xh, uh):
        return np.atleast_1d(thermal_interface(x[0], xh[0], uh[0], b_l, k_l, b, Th, net.guard))

    spec = AgentSpec(
        alpha_fn=lambda x: a_l * (Te - np.asarray(x)),
        beta_fn=lambda x: np.array([[b_l * (Th - float(x[0]))]]),
        B=[[g]], C=[[1.0]], Q=[[1.0 / g]],
        lam=-a_l / g, theta=-k_l / g,
        interface=interface, rho=ParamK(0.0, 1),
        jacobian=lambda x: np.array([[-a_l]]),
        name=f"room {l + 1}",
    )
    a_n = net.a_nom
    nominal = (lambda x: a_n * (Te - np.asarray(x)),
               lambda x: np.array([[b * (Th - float(x[0]))]]))
    return spec, nominal


def thermal_profiles(net, n_samples=256, seed=0):
    """Storage profiles of all rooms, checked over ``[Te - 10, Th - guard]``."""
    box = ([net.Te - 10.0], [net.Th - net.guard])
    out = []
    for l in range(net.L):
        spec, nominal = room_spec(net, l)
        out.append(agent_storage_profile(spec, nominal, box, u_box=([0.0], [1.0]),
                                         n_samples=n_samples, seed=seed))
    return out


@dataclass(frozen=True)
class ThermalCertificate:
    partition: Partition
    profiles: Sequence[StorageProfile]
    composed: ComposedCert
    exists: bool
    witness_trace: float

    @property
    def eta_rate(self):
        return min(c.eta.coeff for c in self.composed.subsystems)

    def to_dict(self):
        return {"partition": self.partition.to_dict(), "composed": self.composed.to_dict(),
                "exists_Z": self.exists, "witness_trace": self.witness_trace,
                "eta_rate": self.eta_rate}


def thermal_certificate(net, partition, profiles=None, **solve_kw):
    """Group roll-ups and the relaxed composition with ``mu = 1``.

    The composition runs in group order (agents of group 0 first), where
    ``W = I``, ``H = What = blockdiag(1_{L_i})``.
    """
    profiles = profiles if profiles is not None else thermal_profiles(net)
    certs = [group_subsystem([profiles[l] for l in g]) for g in partition.groups()]
    o = partition.order
    Mg = net.Mtilde[np.ix_(o, o)]
    G = assemble_global(certs, np.ones(len(certs)))
    fit = fit_coupling(G.W, Mg, G.H, G.W_hat)
    composed = solve_relaxed(fit.Y, G.W, Mg, certs, pin_mu=True, Mhat=fit.Mhat, **solve_kw)
    ex = exists_Z(net.Mtilde, partition.Ybar)
    wt = float(np.trace(ex.Z)) if ex.exists else math.nan
    return ThermalCertificate(partition, tuple(profiles), composed, bool(ex.exists), wt)


@dataclass(frozen=True)
class ControllerConfig:
    """Sampled proportional tracking of a reference per group."""

    kappa: float = 0.25
    u_max: float = 1.0
    hold: float = 1.0
    trigger: float = 20.0
    pre_ref: float = 18.0
    bands: tuple = ((21.0, 22.0), (22.0, 23.0), (23.0, 24.0))

    def __post_init__(self):
        object.__setattr__(self, "bands", tuple(tuple(float(v) for v in b) for b in self.bands))
        if self.kappa < 0 or self.u_max <= 0 or self.hold <= 0 or self.trigger < 0:
            raise ValueError("invalid controller configuration")
        if any(len(b) != 2 or b[0] > b[1] for b in self.bands):
            raise ValueError("bands must be (low, high) pairs")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise ValueError(f"unknown controller settings: {', '.join(bad)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["bands"] = [list(b) for b in self.bands]
        return d

    def reference(self, t, N):
        if len(self.bands) < N:
            raise ValueError(f"{N} groups but only {len(self.bands)} bands configured")
        if t < self.trigger:
            return np.full(N, self.pre_ref)
        return np.array([b[1] for b in self.bands[:N]])

    def control(self, t, xh):
        ref = self.reference(t, len(xh))
        return np.clip(self.kappa * (ref - xh), 0.0, self.u_max)


@dataclass
class Trajectories:
    t: np.ndarray
    x: np.ndarray
    xh: np.ndarray
    u: np.ndarray
    uh: np.ndarray
    V_groups: np.ndarray
    assign: np.ndarray
    gamma: float
    info: dict = field(default_factory=dict)

    @property
    def V(self):
        return self.V_groups.sum(axis=0)

    def group_error(self):
        """Per-group ``max_l |x_l - xh_i|`` at every time step."""
        err = np.abs(self.x - self.xh[self.assign])
        N = self.xh.shape[0]
        return np.array([err[self.assign == i].max(axis=0) for i in range(N)])


def _group_V(x, xh, assign, gamma, N):
    e2 = (x - xh[assign]) ** 2 / (2 * gamma)
    return np.bincount(assign, weights=e2, minlength=N)


def simulate(net, partition, controller=None, horizon=60.0, dt=0.01, xh0=None,
             uh_fn=None):
    """Fixed-step RK4 run of rooms and aggregate rooms together.

    The aggregate input is held constant over each ``controller.hold``
    interval; the concrete input is the interface evaluated inside every
    Runge-Kutta stage.

    Parameters
    ----------
    uh_fn : callable, optional
        ``uh_fn(t, xh) -> uh`` replacing the tracking controller.
    """
    ctl = controller or ControllerConfig()
    if not (0 < dt <= 0.05):
        raise ValueError("dt must lie in (0, 0.05] minutes")
    if horizon < ctl.trigger + 20.0 and uh_fn is None:
        raise ValueError("horizon must extend at least 20 minutes past the trigger")
    steps_per_hold = ctl.hold / dt
    if abs(steps_per_hold - round(steps_per_hold)) > 1e-9:
        raise ValueError("hold interval must be a multiple of dt")
    steps_per_hold = int(round(steps_per_hold))
    n_steps = int(round(horizon / dt))
    assign = partition.assign
    N = partition.N
    Mbar = partition.Mbar
    a, b, k = net.a, net.b, net.k
    an, bn = net.a_nom, net.b_nom
    g, Te, Th = net.gamma, net.Te, net.Th
    Mt = net.Mtilde
    control = uh_fn or ctl.control

    def rhs(x, xh, uh):
        u = thermal_interface(x, xh[assign], uh[assign], b, k, bn, Th, net.guard)
        dx = a * (Te - x) + b * (Th - x) * u + g * (Mt @ x)
        dxh = an * (Te - xh) + bn * (Th - xh) * uh + g * (Mbar @ xh)
        return dx, dxh, u

    x = net.x0.astype(float).copy()
    xh = aggregate_initial(net, partition) if xh0 is None else np.asarray(xh0, dtype=float).copy()
    T = np.arange(n_steps + 1) * dt
    X = np.empty((net.L, n_steps + 1))
    XH = np.empty((N, n_steps + 1))
    U = np.empty((net.L, n_steps + 1))
    UH = np.empty((N, n_steps + 1))
    uh = np.asarray(control(0.0, xh), dtype=float)
    for s in range(n_steps + 1):
        if s % steps_per_hold == 0:
            uh = np.asarray(control(T[s], xh), dtype=float)
        k1x, k1h, u = rhs(x, xh, uh)
        X[:, s], XH[:, s], U[:, s], UH[:, s] = x, xh, u, uh
        if s == n_steps:
            break
        k2x, k2h, _ = rhs(x + 0.5 * dt * k1x, xh + 0.5 * dt * k1h, uh)
        k3x, k3h, _ = rhs(x + 0.5 * dt * k2x, xh + 0.5 * dt * k2h, uh)
        k4x, k4h, _ = rhs(x + dt * k3x, xh + dt * k3h, uh)
        x = x + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        xh = xh + dt / 6.0 * (k1h + 2 * k2h + 2 * k3h + k4h)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(xh))):
            raise NonFiniteError(f"non-finite state at t = {T[s + 1]:.4f}")
    Vg = np.array([_group_V(X[:, s], XH[:, s], assign, g, N) for s in range(n_steps + 1)]).T
    return Trajectories(T, X, XH, U, UH, Vg, assign.copy(), g,
                        info={"dt": dt, "horizon": horizon, "controller": ctl.to_dict()})


@dataclass
class MonitorReport:
    max_violation: float
    max_violation_fd: float
    tol: float
    envelope: np.ndarray
    error_envelope: np.ndarray
    envelope_respected: bool
    errors_respected: bool
    delta: np.ndarray
    eta_rate: float
    max_input_deviation: float
    reach_times: list

    @property
    def dissipation_ok(self):
        return self.max_violation <= self.tol and self.max_violation_fd <= self.tol

    def to_dict(self):
        return {"max_violation": self.max_violation,
                "max_violation_fd": self.max_violation_fd, "tol": self.tol,
                "dissipation_ok": self.dissipation_ok,
                "envelope_respected": self.envelope_respected,
                "errors_respected": self.errors_respected,
                "eta_rate": self.eta_rate, "max_envelope": float(self.envelope.max()),
                "max_delta": float(self.delta.max()),
                "max_input_deviation": self.max_input_deviation,
                "reach_times": self.reach_times}


def _vdot(net, traj, s):
    """Exact time derivative of the summed storage at step ``s``."""
    assign = traj.assign
    x, xh, u, uh = traj.x[:, s], traj.xh[:, s], traj.u[:, s], traj.uh[:, s]
    dx = net.a * (net.Te - x) + net.b * (net.Th - x) * u + net.gamma * (net.Mtilde @ x)
    Mbar = traj.info.get("Mbar")
    dxh = (net.a_nom * (net.Te - xh) + net.b_nom * (net.Th - xh) * uh
           + net.gamma * (Mbar @ xh))
    return float(np.sum((x - xh[assign]) * (dx - dxh[assign])) / net.gamma)


def monitor(traj, cert, net, controller=None):
    """Check the dissipation inequality along a run and build the envelope.

    With all ``mu_i = 1`` the summed storage obeys
    ``V' <= -eta V + Delta(xh)``, ``Delta(xh) = xh^T Z xh + sum Delta_i(xh_i)``
    and ``eta`` the smallest group rate. ``V'`` is taken both from the
    vector field and by central differences. The comparison system
    ``E' = -eta E + Delta`` is stepped exactly with the larger endpoint
    value of ``Delta`` on each step, and the room errors are held against
    ``sqrt(2 gamma E)``.
    """
    comp = cert.composed
    traj.info["Mbar"] = cert.partition.Mbar
    Z, mu = comp.Z, comp.mu
    eta = cert.eta_rate
    subs = comp.subsystems
    n = traj.t.size
    delta = np.empty(n)
    for s in range(n):
        xh = traj.xh[:, s]
        d_i = np.array([c.delta_value(np.array([xh[i]])) for i, c in enumerate(subs)])
        delta[s] = float(xh @ Z @ xh + mu @ d_i)
    V = traj.V_groups.T @ mu
    bound = -eta * V + delta
    vdot = np.array([_vdot(net, traj, s) for s in range(n)])
    scale = max(1.0, float(np.abs(bound).max()), float(np.abs(vdot).max()))
    viol = float(np.max(vdot - bound))
    dt = float(traj.t[1] - traj.t[0])
    fd = (V[2:] - V[:-2]) / (2 * dt)
    # the held input jumps at sample instants; skip stencils that straddle one
    hold = int(round(traj.info["controller"]["hold"] / dt))
    idx = np.arange(1, n - 1)
    ok = (idx % hold != 0)
    viol_fd = float(np.max((fd - bound[1:-1])[ok])) if ok.any() else -math.inf
    tol = 1e-3 * scale
    E = np.empty(n)
    E[0] = V[0]
    decay = math.exp(-eta * dt)
    for s in range(n - 1):
        dmax = max(delta[s], delta[s + 1])
        E[s + 1] = decay * E[s] + (1 - decay) * dmax / eta
    env_ok = bool(np.all(V <= E * (1 + 1e-9) + 1e-12))
    mu_room = mu[traj.assign]
    err_env = np.sqrt(2 * net.gamma * np.maximum(E, 0.0)[None, :] / mu_room[:, None])
    room_err = np.abs(traj.x - traj.xh[traj.assign])
    err_ok = bool(np.all(room_err <= err_env * (1 + 1e-9) + 1e-12))
    dev = float(np.max(np.abs(traj.u - traj.uh[traj.assign])))
    N = traj.xh.shape[0]
    ctl = controller or ControllerConfig.from_dict(
        {k: v for k, v in traj.info["controller"].items()})
    reach = []
    for i in range(min(N, len(ctl.bands))):
        lo, hi = ctl.bands[i]
        inside = (traj.t >= ctl.trigger) & (traj.xh[i] >= lo) & (traj.xh[i] <= hi)
        hit = np.flatnonzero(inside)
        reach.append(float(traj.t[hit[0]] - ctl.trigger) if hit.size else None)
    return MonitorReport(viol, viol_fd, tol, E, err_env, env_ok, err_ok, delta, eta,
                         dev, reach)


def trajectory_table(traj, report=None):
    """Header and rows for the CSV export.

    Columns: ``t``, ``x_1..x_L``, ``xhat_1..xhat_N``, ``u_1..u_L``,
    ``uhat_1..uhat_N``, ``V_1..V_N``, ``V`` and, with a report,
    ``delta`` and ``envelope``.
    """
    L, N = traj.x.shape[0], traj.xh.shape[0]
    header = (["t"] + [f"x_{l + 1}" for l in range(L)] + [f"xhat_{i + 1}" for i in range(N)]
              + [f"u_{l + 1}" for l in range(L)] + [f"uhat_{i + 1}" for i in range(N)]
              + [f"V_{i + 1}" for i in range(N)] + ["V"])
    cols = [traj.t[None, :], traj.x, traj.xh, traj.u, traj.uh, traj.V_groups, traj.V[None, :]]
    if report is not None:
        header += ["delta", "envelope"]
        cols += [report.delta[None, :], report.envelope[None, :]]
    data = np.vstack(cols).T
    return header, [list(map(float, r)) for r in data]
