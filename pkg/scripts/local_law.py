"""Local energy (F^Omega + C0 #) / |Omega| across dyadic blown-up windows.

C0 is calibrated on separate replicas; the 99th percentile should not trend
with the window size L'.
"""
from _common import parser, run

from loggas.harness import ExperimentSpec, local_law_experiment

if __name__ == "__main__":
    p = parser(__doc__, replicas=500)
    p.add_argument("--beta", type=float, default=2.0)
    args = p.parse_args()
    spec = ExperimentSpec(betas=(args.beta,), ns=(1024,), replicas=args.replicas,
                          window_scales=(16, 32, 64, 128, 256), calibration=50, seed=args.seed)
    run(local_law_experiment, spec, args, "local_law")
