"""Metropolis vs tridiagonal samples at N = 64, beta = 2: two-sample KS on
three linear statistics."""
import argparse

import numpy as np
from scipy import stats

from loggas.equilibrium import Potential, solve_equilibrium
from loggas.sampler import McmcParams, ReplicaSpec, sample_replicas

STATISTICS = {
    "sum x^2": lambda x: np.sum(x**2),
    "sum cos(3x)": lambda x: np.sum(np.cos(3 * x)),
    "sum |x|": lambda x: np.sum(np.abs(x)),
}


def crosscheck(n=64, beta=2.0, replicas=400, seed=7, workers=1, mcmc=McmcParams()):
    tri = sample_replicas(ReplicaSpec(n, beta, seed, "tridiagonal"), replicas, workers)
    mc = sample_replicas(ReplicaSpec(n, beta, seed + 1, "mcmc", (0.0, 0.0, 1.0), mcmc), replicas, workers)
    out = {}
    for name, f in STATISTICS.items():
        a = np.array([f(c.points) for c in tri])
        b = np.array([f(c.points) for c in mc])
        out[name] = float(stats.ks_2samp(a, b).pvalue)
    return out


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--replicas", type=int, default=400)
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()
    solve_equilibrium(Potential.quadratic())
    for name, pv in crosscheck(replicas=args.replicas, workers=args.workers).items():
        print(f"{name:>12}: KS p = {pv:.3f}")
