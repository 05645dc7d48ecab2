"""Command-line front end.

    abstrakt <command> --config PATH [--seed N] [--out DIR] [--set KEY=VALUE ...]

Exit codes: 0 success, 1 invalid input, 2 infeasible problem or failed
certificate condition, 3 runtime failure during simulation. Failures write
``error.json`` into the output directory and a one-line message to stderr.
Wall-clock data goes to ``metadata.json`` only, so every other artifact is
byte-identical across runs with the same config and seed.
"""

import argparse
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import datetime
import json
import math
import os
import sys
import time
import traceback
import warnings

import numpy as np

from . import __version__
from .aggregation import (Partition, PreAssignment, is_equitable, partition_matrix,
                          partition_search, to_dot)
from .compose import (ParamK, SubsystemCert, SupplyRate, assemble_global, exists_Z,
                      fit_coupling, q_matrix, solve_relaxed)
from .conic import check_psd
from .errors import (ConditionError, DimensionError, GuardError, InfeasibleError,
                     NonFiniteError, RankError)
from .io import JsonInputError, atomic_write, read_json, write_csv, write_json
from .linear import LinearSystem, fit_abstraction, synth_gain, truncation_lift
from .thermal import (ControllerConfig, ThermalParams, build_network, circle_laplacian,
                      monitor, simulate, thermal_certificate, thermal_profiles,
                      trajectory_table)

__all__ = ["RunConfig", "run", "main", "COMMANDS", "REFERENCE_MBAR", "REFERENCE_Z",
           "DEFAULT_SCENARIO"]

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_RUNTIME = 0, 1, 2, 3

REFERENCE_MBAR = np.array([[-1 / 3, 1 / 6, 1 / 6], [1 / 14, -1 / 7, 1 / 14],
                           [1 / 10, 1 / 10, -1 / 5]])
REFERENCE_Z = np.array([[2.0016, -1.0490, -0.9526], [-1.0490, 1.9897, -0.9407],
                        [-0.9526, -0.9407, 1.8933]])
REFERENCE_GROUPS = [list(range(1, 7)), list(range(7, 21)), list(range(21, 31))]

DEFAULT_SCENARIO = {
    "L": 30,
    "N": 3,
    "seed": 0,
    "pre_assign": [list(range(1, 7)), list(range(11, 19)), list(range(21, 28))],
    "params": {},
    "controller": {},
    "horizon": 60.0,
    "dt": 0.01,
}


class InputError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    input_path: str = None
    output_dir: str = "out"
    seed: int = None
    overrides: dict = field(default_factory=dict)


def _req(cfg, key):
    if key not in cfg:
        raise InputError(f"missing required field '{key}'")
    return cfg[key]


def _coupling(cfg):
    if "Mtilde" in cfg:
        M = np.asarray(cfg["Mtilde"], dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise InputError("Mtilde must be a square matrix")
        return M
    if "ring" in cfg:
        return circle_laplacian(int(cfg["ring"]))
    if "L" in cfg:
        return circle_laplacian(int(cfg["L"]))
    raise InputError("give the coupling as 'Mtilde', 'ring' or 'L'")


def _groups_to_assign(groups, L):
    """1-based room lists to a 0-based assignment vector."""
    assign = np.full(L, -1)
    for i, g in enumerate(groups):
        for room in g:
            r = int(room)
            if not 1 <= r <= L:
                raise InputError(f"room {r} outside 1..{L}")
            if assign[r - 1] >= 0:
                raise InputError(f"room {r} listed in two groups")
            assign[r - 1] = i
    if np.any(assign < 0):
        missing = (np.flatnonzero(assign < 0) + 1).tolist()
        raise InputError(f"rooms {missing} are not in any group")
    return assign


def _pre(cfg, L):
    N = int(cfg.get("N", len(cfg.get("pre_assign", []))))
    groups = [list(g) for g in cfg.get("pre_assign", [])]
    if len(groups) > N:
        raise InputError("more pre-assignment groups than N")
    groups += [[] for _ in range(N - len(groups))]
    idx = [[int(r) - 1 for r in g] for g in groups]
    for g in idx:
        for r in g:
            if not 0 <= r < L:
                raise InputError(f"pre-assigned room {r + 1} outside 1..{L}")
    return PreAssignment.from_groups(L, idx), N


def _partition_json(p):
    d = p.to_dict()
    d["groups"] = [(g + 1).tolist() for g in p.groups()]
    return d


def cmd_partition(cfg, out):
    M = _coupling(cfg)
    pre, N = _pre(cfg, M.shape[0])
    p = partition_search(M, pre, N)
    write_json(os.path.join(out, "partition.json"), _partition_json(p))
    atomic_write(os.path.join(out, "partition.dot"), to_dot(p, M))
    return {"groups": _partition_json(p)["groups"], "residual_norm": p.residual_norm}


def cmd_check_equitable(cfg, out):
    M = _coupling(cfg)
    assign = _groups_to_assign(_req(cfg, "groups"), M.shape[0])
    r = is_equitable(M, partition_matrix(assign), tol=float(cfg.get("tol", 1e-9)))
    rep = {"equitable": bool(r["equitable"]), "Mbar": r["Mbar"].tolist(),
           "residual_norm": r["residual_norm"], "groups": cfg["groups"]}
    write_json(os.path.join(out, "equitable.json"), rep)
    return {"equitable": rep["equitable"], "residual_norm": rep["residual_norm"]}


def _matrix(cfg, key, default=None):
    if key not in cfg:
        if default is None:
            raise InputError(f"missing required field '{key}'")
        return default
    return np.atleast_2d(np.asarray(cfg[key], dtype=float))


def cmd_synth_linear(cfg, out):
    sysm = LinearSystem(_matrix(cfg, "A"), _matrix(cfg, "B"), _matrix(cfg, "C"))
    if "P" in cfg:
        P = _matrix(cfg, "P")
    else:
        P = truncation_lift(sysm.n, int(_req(cfg, "n_hat")))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ab = fit_abstraction(sysm, P)
    if "B_hat" in cfg:
        ab = ab.with_input_map(sysm, _matrix(cfg, "B_hat"))
    kw = {}
    if "alpha" in cfg:
        kw["alpha"] = float(cfg["alpha"])
    if "gain_bound" in cfg:
        kw["gain_bound"] = None if cfg["gain_bound"] is None else float(cfg["gain_bound"])
    cert = synth_gain(sysm, ab, **kw)
    lmi = float(np.linalg.eigvalsh(cert.lmi_matrix(sysm.A, sysm.B))[-1])
    res = {"abstraction": ab.to_dict(), "certificate": cert.to_dict(),
           "lmi_max_eig": lmi}
    write_json(os.path.join(out, "certificate.json"), res)
    return {"alpha": cert.alpha, "e_bar": cert.e_bar, "lmi_max_eig": lmi}


def _supply(d):
    if isinstance(d, dict) and "X11" in d:
        return SupplyRate(d["X11"], d["X12"], d["X21"], d["X22"])
    if isinstance(d, dict) and "passivity" in d:
        return SupplyRate.passivity(int(d["passivity"]))
    raise InputError("supply rate needs blocks X11..X22 or {'passivity': size}")


def _write_q_eigs(path, eigs):
    write_csv(path, ["index", "eigenvalue"], [[i, float(v)] for i, v in enumerate(eigs)])


def cmd_compose(cfg, out):
    kw = {"pin_mu": bool(cfg.get("pin_mu", True))}
    if "S" in cfg:
        kw["S"] = np.asarray(cfg["S"], dtype=float)
    if "r" in cfg:
        kw["r"] = np.asarray(cfg["r"], dtype=float)
    if "subsystems" in cfg:
        certs = []
        for s in cfg["subsystems"]:
            certs.append(SubsystemCert(
                W=_matrix(s, "W"), W_hat=_matrix(s, "W_hat"), H=_matrix(s, "H"),
                X=_supply(_req(s, "X")), nu=ParamK(float(s.get("nu", 1.0)), 2),
                eta=ParamK(float(s.get("eta", 1.0)), 1), rho=ParamK(float(s.get("rho", 0.0)), 1)))
        M = _matrix(cfg, "M")
        G = assemble_global(certs, np.ones(len(certs)))
        fit = fit_coupling(G.W, M, G.H, G.W_hat)
        comp = solve_relaxed(fit.Y, G.W, M, certs, Mhat=fit.Mhat, **kw)
        res = {"composed": comp.to_dict()}
    else:
        M = _coupling(cfg)
        L = M.shape[0]
        if "groups" in cfg:
            p = Partition.from_assign(M, _groups_to_assign(cfg["groups"], L))
        else:
            pre, N = _pre(cfg, L)
            p = partition_search(M, pre, N)
        o = p.order
        Mg = M[np.ix_(o, o)]
        certs = [SubsystemCert(np.eye(k), np.ones((k, 1)), np.ones((k, 1)),
                               SupplyRate.passivity(int(k)), ParamK(1.0, 2), ParamK(1.0, 1),
                               ParamK(0.0, 1)) for k in p.sizes]
        G = assemble_global(certs, np.ones(p.N))
        fit = fit_coupling(G.W, Mg, G.H, G.W_hat)
        ex = None
        try:
            ex = exists_Z(M, p.Ybar)
        except ValueError:
            pass
        comp = solve_relaxed(fit.Y, G.W, Mg, certs, Mhat=fit.Mhat, **kw)
        res = {"partition": _partition_json(p), "composed": comp.to_dict(),
               "exists_Z": None if ex is None else bool(ex.exists)}
    _write_q_eigs(os.path.join(out, "q_eigenvalues.csv"), comp.q_eigenvalues)
    write_json(os.path.join(out, "composed.json"), res)
    return {"trace_Z": float(np.trace(comp.Z)), "max_q_eig": comp.max_q_eig,
            "mu": comp.mu.tolist()}


def _scenario(cfg, seed):
    sc = {**DEFAULT_SCENARIO, **cfg}
    if seed is not None:
        sc["seed"] = seed
    return sc


def _thermal_pipeline(sc, out, stages):
    stages["stage"] = "network"
    params = ThermalParams.from_dict(sc.get("params", {}))
    net = build_network(int(sc["L"]), int(sc["seed"]), params)
    stages["stage"] = "partition"
    if "groups" in sc:
        p = Partition.from_assign(net.Mtilde, _groups_to_assign(sc["groups"], net.L))
    else:
        pre, N = _pre(sc, net.L)
        p = partition_search(net.Mtilde, pre, N)
    stages["stage"] = "profiles"
    profiles = thermal_profiles(net)
    stages["stage"] = "composition"
    cert = thermal_certificate(net, p, profiles)
    stages["stage"] = "simulation"
    ctl = ControllerConfig.from_dict(sc.get("controller", {}))
    traj = simulate(net, p, ctl, horizon=float(sc["horizon"]), dt=float(sc["dt"]))
    stages["stage"] = "monitor"
    rep = monitor(traj, cert, net, ctl)
    header, rows = trajectory_table(traj, rep)
    write_csv(os.path.join(out, "trajectories.csv"), header, rows)
    _write_q_eigs(os.path.join(out, "q_eigenvalues.csv"), cert.composed.q_eigenvalues)
    report = {"network": net.to_dict(), "params": params.to_dict(),
              "controller": ctl.to_dict(), "partition": _partition_json(p),
              "certificate": cert.to_dict(), "monitor": rep.to_dict(),
              "group_max_error": traj.group_error().max(axis=1).tolist()}
    write_json(os.path.join(out, "report.json"), report)
    return net, p, cert, traj, rep, ctl


def cmd_simulate_thermal(cfg, out, seed=None):
    sc = _scenario(cfg, seed)
    stages = {}
    try:
        _, p, cert, traj, rep, _ = _thermal_pipeline(sc, out, stages)
    except Exception as exc:
        exc.stage = stages.get("stage")
        raise
    return {"envelope_respected": rep.envelope_respected,
            "errors_respected": rep.errors_respected, "reach_times": rep.reach_times}


def cmd_reproduce_paper(cfg, out, seed=None):
    sc = _scenario(cfg, seed)
    stages = {}
    try:
        net, p, cert, traj, rep, ctl = _thermal_pipeline(sc, out, stages)
    except Exception as exc:
        exc.stage = stages.get("stage")
        raise
    groups = [(g + 1).tolist() for g in p.groups()]
    o = p.order
    certs = cert.composed.subsystems
    Mg = net.Mtilde[np.ix_(o, o)]
    Qp = q_matrix(cert.composed.Y, np.eye(net.L), Mg, certs, REFERENCE_Z, np.ones(p.N))
    ref_chk = check_psd(-Qp, tol=1e-6)
    trace = float(np.trace(cert.composed.Z))
    Mbar_err = float(np.abs(p.Mbar - REFERENCE_MBAR).max()) if p.Mbar.shape == (3, 3) else math.inf
    reach_ok = all(t is not None and t <= 20.0 for t in rep.reach_times)
    summary = {
        "partition_groups": groups,
        "partition_matches_table": groups == REFERENCE_GROUPS,
        "Mbar": p.Mbar.tolist(),
        "Mbar_max_abs_error": Mbar_err,
        "Mbar_matches": Mbar_err <= 1e-12,
        "trace_Z": trace,
        "trace_Z_reference": float(np.trace(REFERENCE_Z)),
        "trace_Z_ok": trace <= float(np.trace(REFERENCE_Z)) * 1.01,
        "reference_Z_feasible": bool(ref_chk.is_psd),
        "reference_Z_max_q_eig": float(-ref_chk.min_eig),
        "exists_Z": cert.exists,
        "envelope_respected": rep.envelope_respected,
        "errors_respected": rep.errors_respected,
        "dissipation_ok": rep.dissipation_ok,
        "reach_times": rep.reach_times,
        "bands_reached_within_20_min": reach_ok,
        "group_max_error": traj.group_error().max(axis=1).tolist(),
    }
    keys = ("partition_matches_table", "Mbar_matches", "trace_Z_ok", "reference_Z_feasible",
            "exists_Z", "envelope_respected", "errors_respected", "bands_reached_within_20_min")
    summary["all_ok"] = all(summary[k] for k in keys)
    write_json(os.path.join(out, "summary.json"), summary)
    return summary


COMMANDS = {
    "synth-linear": cmd_synth_linear,
    "partition": cmd_partition,
    "compose": cmd_compose,
    "check-equitable": cmd_check_equitable,
    "simulate-thermal": cmd_simulate_thermal,
    "reproduce-paper": cmd_reproduce_paper,
}
_SEEDED = {"simulate-thermal", "reproduce-paper"}


def _apply_overrides(cfg, overrides):
    cfg = dict(cfg)
    for key, val in overrides.items():
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise InputError(f"override '{key}' does not address a mapping")
        node[parts[-1]] = val
    return cfg


def _classify(exc):
    if isinstance(exc, (InfeasibleError, ConditionError)):
        return EXIT_INFEASIBLE
    if isinstance(exc, (GuardError, NonFiniteError)):
        return EXIT_RUNTIME
    if isinstance(exc, (JsonInputError, InputError, DimensionError, RankError, ValueError,
                        KeyError, TypeError, FileNotFoundError, IsADirectoryError)):
        return EXIT_INPUT
    return EXIT_RUNTIME


def _error_report(exc, code):
    rep = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, InfeasibleError) and exc.diagnosis is not None:
        rep["diagnosis"] = exc.diagnosis
    if isinstance(exc, ConditionError):
        rep["condition"] = exc.condition
        rep["violation"] = exc.violation
        if exc.worst_point is not None:
            rep["worst_point"] = np.asarray(exc.worst_point).tolist()
    if isinstance(exc, JsonInputError):
        rep["line"], rep["column"] = exc.line, exc.column
    if getattr(exc, "stage", None):
        rep["stage"] = exc.stage
    return rep


def _run_one(command, cfg, out, seed):
    os.makedirs(out, exist_ok=True)
    fn = COMMANDS[command]
    t0 = time.time()
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    try:
        result = fn(cfg, out, seed) if command in _SEEDED else fn(cfg, out)
        code = EXIT_OK
        if command == "reproduce-paper" and not result.get("all_ok", False):
            code = EXIT_INFEASIBLE
        payload = {"result": result}
    except Exception as exc:  # noqa: BLE001 - every failure becomes a report
        code = _classify(exc)
        payload = {"error": _error_report(exc, code)}
        write_json(os.path.join(out, "error.json"), payload["error"])
        if code == EXIT_RUNTIME and not isinstance(exc, (GuardError, NonFiniteError)):
            payload["error"]["traceback"] = traceback.format_exc()
    write_json(os.path.join(out, "metadata.json"),
               {"command": command, "started": started, "seconds": time.time() - t0,
                "version": __version__, "seed": seed, "exit_code": code})
    return code, payload


def _run_one_star(args):
    return _run_one(*args)


def run(config):
    """Execute a :class:`RunConfig`; returns the exit code.

    A config holding ``"scenarios": [...]`` runs each entry (merged over
    the top-level fields) in a process pool, writing to ``<out>/<name>``.
    """
    if config.command not in COMMANDS:
        print(f"abstrakt: unknown command {config.command}", file=sys.stderr)
        return EXIT_INPUT
    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    try:
        cfg = {} if config.input_path is None else read_json(config.input_path)
        if not isinstance(cfg, dict):
            raise InputError("config must be a JSON object")
        cfg = _apply_overrides(cfg, config.overrides)
        if config.input_path is None and config.command not in ("reproduce-paper",
                                                                "simulate-thermal"):
            raise InputError(f"{config.command} needs --config")
    except Exception as exc:  # noqa: BLE001
        code = _classify(exc)
        rep = _error_report(exc, code)
        write_json(os.path.join(out, "error.json"), rep)
        print(f"abstrakt: {rep['message']}", file=sys.stderr)
        return code
    scenarios = cfg.pop("scenarios", None)
    if scenarios is None:
        code, payload = _run_one(config.command, cfg, out, config.seed)
        _report(payload)
        return code
    jobs = []
    for k, sc in enumerate(scenarios):
        name = str(sc.get("name", f"scenario_{k:03d}"))
        merged = {**cfg, **{key: v for key, v in sc.items() if key != "name"}}
        jobs.append((config.command, merged, os.path.join(out, name), config.seed))
    workers = min(len(jobs), os.cpu_count() or 1) or 1
    with ProcessPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(_run_one_star, jobs))
    for (_, _, path, _), (code, payload) in zip(jobs, results):
        _report(payload, prefix=os.path.basename(path) + ": ")
    return max(code for code, _ in results)


def _report(payload, prefix=""):
    if "error" in payload:
        print(f"abstrakt: {prefix}{payload['error']['message']}", file=sys.stderr)
    else:
        print(prefix + json.dumps(payload["result"], default=float, sort_keys=True))


def _parse_override(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError("overrides take the form KEY=VALUE")
    key, val = text.split("=", 1)
    try:
        return key, json.loads(val)
    except json.JSONDecodeError:
        return key, val


def main(argv=None):
    ap = argparse.ArgumentParser(prog="abstrakt", description=__doc__.split("\n")[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON config file")
    ap.add_argument("--seed", type=int, default=None, help="RNG seed (overrides the config)")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--set", action="append", type=_parse_override, default=[],
                    metavar="KEY=VALUE", help="override a config field (dotted keys allowed)")
    args = ap.parse_args(argv)
    cfg = RunConfig(args.command, args.config, args.out, args.seed, dict(args.set))
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
