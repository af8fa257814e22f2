"""Per-sample audits of the discrepancy, energy, local-energy-control,
rough L^1 and moment inequalities; reports empirical constants and trends."""
from _common import parser, run

from loggas.harness import ExperimentSpec, inequality_audit

if __name__ == "__main__":
    p = parser(__doc__, replicas=500)
    p.add_argument("--beta", type=float, default=2.0)
    args = p.parse_args()
    spec = ExperimentSpec(betas=(args.beta,), ns=(1024,), replicas=args.replicas,
                          window_scales=(16, 32, 64, 128), scales=(0.25, "N^-1/4", "N^-1/2"),
                          order=6, seed=args.seed)
    run(inequality_audit, spec, args, "audit")
