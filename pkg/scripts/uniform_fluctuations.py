"""Empirical log-Laplace transforms of Fluct_N for bumps and kappa/zeta kernels,
against s^2 ||xi||^2 / beta, over N doublings."""
from _common import parser, run

from loggas.harness import ExperimentSpec, uniform_fluct_experiment

if __name__ == "__main__":
    p = parser(__doc__, replicas=2000)
    p.add_argument("--beta", type=float, default=2.0)
    args = p.parse_args()
    spec = ExperimentSpec(betas=(args.beta,), ns=(256, 512, 1024), replicas=args.replicas,
                          scales=(0.25, "N^-1/2"), kernel_heights=(16, 64), seed=args.seed)
    run(uniform_fluct_experiment, spec, args, "uniform")
