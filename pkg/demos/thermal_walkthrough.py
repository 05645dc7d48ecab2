"""Thermal ring walkthrough: partition, certify, simulate, monitor.

Run ``python3 demos/thermal_walkthrough.py [seed] [--plot out.png]``.
The plot needs matplotlib, which the package itself does not require.
"""

import sys

import numpy as np

from abstrakt.aggregation import PreAssignment, partition_search
from abstrakt.thermal import (ControllerConfig, build_network, monitor, simulate,
                              thermal_certificate)


def main(argv):
    seed = int(argv[0]) if argv and not argv[0].startswith("-") else 0
    net = build_network(30, seed=seed)
    print(f"30 rooms, a in [{net.a.min():.4f}, {net.a.max():.4f}], "
          f"b in [{net.b.min():.4f}, {net.b.max():.4f}]")

    # rooms 1-6, 11-18, 21-27 are fixed; the rest go wherever fits best
    pre = PreAssignment.from_groups(30, [range(0, 6), range(10, 18), range(20, 27)])
    p = partition_search(net.Mtilde, pre, 3)
    for i, g in enumerate(p.groups()):
        print(f"group {i + 1}: rooms {g.min() + 1}-{g.max() + 1} ({g.size})")
    print("aggregate coupling:\n", np.array2string(p.Mbar, precision=4))
    print(f"equitability residual {p.residual_norm:.4f}")

    cert = thermal_certificate(net, p)
    print(f"trace Z = {np.trace(cert.composed.Z):.4f}, "
          f"max eig Q = {cert.composed.max_q_eig:.1e}, decay rate {cert.eta_rate:.4f}")

    ctl = ControllerConfig()
    traj = simulate(net, p, ctl, horizon=60.0, dt=0.01)
    rep = monitor(traj, cert, net, ctl)
    print(f"dissipation bound held: {rep.dissipation_ok} "
          f"(worst {rep.max_violation:.2e}, tol {rep.tol:.2e})")
    print(f"envelope respected: {rep.envelope_respected}, room errors inside: "
          f"{rep.errors_respected}")
    for i, t in enumerate(rep.reach_times):
        lo, hi = ctl.bands[i]
        print(f"group {i + 1} entered [{lo}, {hi}] {t:.2f} min after the trigger")

    if "--plot" in argv:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        path = argv[argv.index("--plot") + 1]
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
        for i in range(p.N):
            ax1.plot(traj.t, traj.xh[i], label=f"group {i + 1}")
            ax1.axhspan(*ctl.bands[i], color=f"C{i}", alpha=0.12)
        ax2.plot(traj.t, traj.x.T, lw=0.6)
        ax1.set(xlabel="t [min]", ylabel="temperature [C]", title="aggregate")
        ax2.set(xlabel="t [min]", title="rooms")
        ax1.legend()
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        print(f"wrote {path}")


if __name__ == "__main__":
    main(sys.argv[1:])
