"""Reduce a random linear system, synthesize the error feedback, check the bound.

Run ``python3 demos/linear_error_bound.py [seed]``.
"""

import math
import sys
import warnings

import numpy as np
import scipy.linalg

from abstrakt.linear import (LinearSystem, UnstableAbstractionWarning, fit_abstraction,
                             synth_gain, truncation_lift)


def main(seed=0):
    g = np.random.default_rng(seed)
    while True:
        s = LinearSystem(g.normal(size=(5, 5)), g.normal(size=(5, 2)), g.normal(size=(1, 5)))
        if s.is_stabilizable():
            break
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UnstableAbstractionWarning)
        ab = fit_abstraction(s, truncation_lift(5, 2))
    print(f"residual |D| = {np.linalg.norm(ab.D):.3f}")
    c = synth_gain(s, ab)
    print(f"alpha = {c.alpha:.4f}, |K| = {np.linalg.norm(c.K, 2):.2f}, e_bar = {c.e_bar:.4f}")

    # worst of a few hundred bang-bang disturbances with |d(t)| <= 1
    n, k = s.n, c.W.shape[1]
    h = 0.25 / c.alpha
    M = np.zeros((n + k, n + k))
    M[:n, :n], M[:n, n:] = c.A_cl, c.W
    E = scipy.linalg.expm(M * h)
    e = np.zeros((n, 300))
    worst = 0.0
    for _ in range(int(math.ceil(50 / c.alpha / h))):
        d = g.normal(size=(k, 300))
        e = E[:n, :n] @ e + E[:n, n:] @ (d / np.linalg.norm(d, axis=0))
        worst = max(worst, float(np.linalg.norm(e, axis=0).max()))
    print(f"largest simulated |e| = {worst:.4f} (bound {c.e_bar:.4f})")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
