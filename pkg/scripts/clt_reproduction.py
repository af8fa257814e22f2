"""Gaussian fluctuations of rescaled bumps for V = x^2 at N = 1024.

Reports sample moments, KS / Jarque-Bera p-values and bootstrap CIs for
beta in {1, 2, 4} at a macroscopic scale and at L = N^-1/4, N^-1/2.
"""
from _common import parser, run

from loggas.harness import ExperimentSpec, clt_experiment

if __name__ == "__main__":
    p = parser(__doc__, replicas=2000)
    p.add_argument("--n", type=int, default=1024)
    args = p.parse_args()
    spec = ExperimentSpec(betas=(1.0, 2.0, 4.0), ns=(args.n,), replicas=args.replicas,
                          scales=(0.25, "N^-1/4", "N^-1/2"), seed=args.seed)
    run(clt_experiment, spec, args, "clt")
