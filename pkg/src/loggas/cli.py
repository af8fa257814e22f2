"""Config-driven runner: ``loggas --config run.json``.

Exit codes: 0 success, 2 invalid config, 3 numerical failure, 4 audit
thresholds not met.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from .cache import JsonCache, atomic_write_text
from .errors import LogGasError, ValidationError
from .harness import (EXPERIMENTS, ExperimentReport, ExperimentSpec, _bump_functions, _context,
                      _one, _replica_spec, _stream, scale_label)

CONFIG_VERSION = 1
COMMANDS = ("sample", "energy", "transport", "clt", "local-law", "uniform", "audit")
TOP_KEYS = {"version", "command", "experiment", "workers", "cache", "verbosity", "save_samples"}

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_THRESHOLD = 0, 2, 3, 4


def default_config(command="clt"):
    return {
        "version": CONFIG_VERSION,
        "command": command,
        "workers": 1,
        "cache": None,
        "verbosity": 1,
        "save_samples": False,
        "experiment": ExperimentSpec().to_dict(),
    }


def load_config(source):
    """Parse and validate a run config (path, JSON text or dict)."""
    if isinstance(source, dict):
        cfg = source
    else:
        text = Path(source).read_text(encoding="utf-8")
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError("config", f"not valid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(cfg, dict):
        raise ValidationError("config", "top level must be a JSON object")
    extra = sorted(set(cfg) - TOP_KEYS)
    if extra:
        raise ValidationError(extra[0], "unknown key")
    if cfg.get("version") != CONFIG_VERSION:
        raise ValidationError("version", f"expected {CONFIG_VERSION}, got {cfg.get('version')!r}")
    if cfg.get("command") not in COMMANDS:
        raise ValidationError("command", f"must be one of {', '.join(COMMANDS)}")
    workers = cfg.get("workers", 1)
    if not isinstance(workers, int) or workers < 1:
        raise ValidationError("workers", "must be a positive integer")
    exp = cfg.get("experiment", {})
    if not isinstance(exp, dict):
        raise ValidationError("experiment", "must be an object")
    spec = ExperimentSpec.from_dict(exp)
    return {**default_config(cfg["command"]), **cfg, "spec": spec}


# ---------------------------------------------------------------- commands


def _sample_chunk(args):
    rs, ks = args
    return [(k, _one(rs, k)) for k in ks]


def _iter_samples(spec, workers):
    from .sampler import map_replicas
    for i_n, n in enumerate(spec.ns):
        for i_b, beta in enumerate(spec.betas):
            rs = _replica_spec(spec, beta, n, _stream(spec, 9, i_b, i_n))
            chunks = [(rs, list(range(i, min(i + 16, spec.replicas)))) for i in range(0, spec.replicas, 16)]
            for chunk in map_replicas(_sample_chunk, chunks, workers):
                for k, cfg in chunk:
                    yield beta, n, k, cfg


def run_sample(spec, workers, cache, out, save_samples=False):
    from .sampler import hamiltonian
    pot, eq = _context(spec, cache)
    rows = []
    for beta, n, k, cfg in _iter_samples(spec, workers):
        x = cfg.points
        rows.append({"beta": float(beta), "n": n, "replica": k, "seed": cfg.provenance["seed"],
                     "sampler": cfg.provenance["sampler"], "min": x[0], "max": x[-1], "mean": float(np.mean(x)),
                     "second_moment": float(np.mean(x**2)), "hamiltonian": hamiltonian(x, pot),
                     "acceptance": cfg.provenance.get("acceptance", 1.0)})
        if save_samples and out is not None:
            atomic_write_text(Path(out) / "samples" / f"beta{beta:g}_n{n}_r{k:05d}.csv", cfg.to_csv())
    summary = {"experiment": "sample", "spec": spec.to_dict(io=False), "pass": True, "checks": {},
               "support": [list(s) for s in eq.support]}
    return ExperimentReport("sample", rows, [], summary)


def run_energy(spec, workers, cache, out, save_samples=False):
    from .electrostatics import (next_order_energy_global, renormalized_energy_field_form,
                                 splitting_check)
    from .equilibrium import blow_up
    pot, eq = _context(spec, cache)
    rows, long_rows = [], []
    for beta, n, k, cfg in _iter_samples(spec, workers):
        e = next_order_energy_global(cfg.points, eq)
        row = {"beta": float(beta), "n": n, "replica": k, "F": e.total, "F_N": e.meta["F_N"],
               "F_N_over_N": e.meta["F_N"] / n, "splitting_residual": splitting_check(cfg.points, pot, eq)}
        if n <= 64:
            f = renormalized_energy_field_form(n * cfg.points, blow_up(eq, n))
            row["F_field_form"] = f.total
            row["field_vs_sum_rel"] = abs(f.total - e.total) / max(1.0, abs(e.total))
        rows.append(row)
    for n in spec.ns:
        for beta in spec.betas:
            sel = [r["F_N_over_N"] for r in rows if r["n"] == n and r["beta"] == float(beta)]
            long_rows.append({"experiment": "energy", "beta": float(beta), "n": n, "label": "global", "scale": n,
                              "statistic": "F_N_over_N_mean", "value": float(np.mean(sel)),
                              "ci_lo": float(np.min(sel)), "ci_hi": float(np.max(sel)), "replicas": len(sel)})
    summary = {"experiment": "energy", "spec": spec.to_dict(io=False), "pass": True, "checks": {}}
    return ExperimentReport("energy", rows, long_rows, summary)


def run_transport(spec, workers, cache, out, save_samples=False):
    from .fluctuations import h_half_norm, mean_prediction, psi_pairing
    from .transport import RESIDUAL_TOL, push_forward_mass_check, solve_transport
    pot, eq = _context(spec, cache)
    rows, checks = [], {}
    for n in spec.ns:
        for z, s, f in _bump_functions(spec, n):
            t0 = time.perf_counter()
            tm = solve_transport(f, eq, pot, cache=cache)
            sup1 = tm.sup_derivative(1)
            t = 0.25 / sup1 if sup1 > 0 else 0.1
            _, dpsi = mean_prediction(tm, eq, 2.0)
            rows.append({"n": n, "center": z, "label": scale_label(s), "scale": f.params[1],
                         "residual": tm.residual, "c_xi": tm.c_xi, "continuity_gap": max(tm.continuity_gap),
                         "degree": len(tm.psi_coef) - 1, "sup_dpsi": sup1, "int_dpsi": dpsi,
                         "h_half_sq": h_half_norm(f) ** 2, "pairing": psi_pairing(tm, f, eq),
                         "mass_check_t": t, "mass_error": push_forward_mass_check(tm, t),
                         "seconds": round(time.perf_counter() - t0, 1)})
            checks[f"residual[N={n},{scale_label(s)},z={z:g}]"] = tm.residual <= RESIDUAL_TOL
    summary = {"experiment": "transport", "spec": spec.to_dict(io=False), "pass": all(checks.values()), "checks": checks}
    return ExperimentReport("transport", rows, [], summary)


RUNNERS = {"sample": run_sample, "energy": run_energy, "transport": run_transport}


def run_command(command, spec, workers=1, cache=None, out=None, save_samples=False):
    if command in RUNNERS:
        return RUNNERS[command](spec, workers, cache, out, save_samples)
    return EXPERIMENTS[command](spec, workers=workers, cache=cache)


# ---------------------------------------------------------------- output


SUMMARY_COLUMNS = {
    "sample": ["beta", "n", "replica", "min", "max", "hamiltonian"],
    "energy": ["beta", "n", "replica", "F_N_over_N", "splitting_residual"],
    "transport": ["n", "label", "residual", "c_xi", "degree", "int_dpsi", "h_half_sq"],
    "clt": ["beta", "n", "label", "variance", "predicted_variance", "ks_p", "mean", "predicted_mean_literal",
            "predicted_mean_corrected"],
    "local-law": ["beta", "n", "label", "median", "p99", "max", "C0_emp"],
    "uniform": ["beta", "n", "label", "variance", "curvature_at_0", "env_a", "env_b", "env_c"],
    "audit": ["beta", "n", "label", "inequality", "constant"],
}


def summary_table(report, limit=30):
    cols = SUMMARY_COLUMNS.get(report.experiment, list(report.rows[0]) if report.rows else [])
    cells = [[_cell(r.get(c)) for c in cols] for r in report.rows[:limit]]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    if len(report.rows) > limit:
        lines.append(f"... {len(report.rows) - limit} more rows in report.csv")
    checks = report.summary.get("checks", {})
    failed = [k for k, v in checks.items() if not v]
    lines.append(f"checks: {len(checks) - len(failed)}/{len(checks)} passed")
    lines += [f"  FAILED {k}" for k in failed[:10]]
    return "\n".join(lines)


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.5g}"
    return "" if v is None else str(v)


def cache_inspect(cache_dir):
    return JsonCache(cache_dir).inspect()


# ------------------------------------------------------------------ main


def _origin(exc):
    tb = traceback.extract_tb(exc.__traceback__)
    for frame in reversed(tb):
        if "loggas" in frame.filename:
            return Path(frame.filename).stem
    return "loggas"


def build_parser():
    p = argparse.ArgumentParser(prog="loggas", description="Log-gas experiments from a JSON config.")
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--seed", type=int, help="override experiment.seed (unsigned 64-bit)")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--cache", metavar="DIR")
    p.add_argument("--print-default-config", nargs="?", const="clt", metavar="COMMAND",
                   help="print a default config for COMMAND (default clt) and exit")
    p.add_argument("--inspect-cache", metavar="DIR", help="list cached solves and exit")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.print_default_config:
        if args.print_default_config not in COMMANDS:
            print(f"error: command: must be one of {', '.join(COMMANDS)}", file=sys.stderr)
            return EXIT_VALIDATION
        print(json.dumps(default_config(args.print_default_config), indent=2))
        return EXIT_OK
    if args.inspect_cache:
        print(json.dumps(cache_inspect(args.inspect_cache), indent=2))
        return EXIT_OK
    if not args.config:
        print("error: config: --config PATH is required", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except OSError as exc:
        print(f"error: config: cannot read {args.config} ({exc.strerror})", file=sys.stderr)
        return EXIT_VALIDATION
    except json.JSONDecodeError as exc:
        print(f"error: config: not valid JSON ({exc.msg} at line {exc.lineno})", file=sys.stderr)
        return EXIT_VALIDATION
    if isinstance(raw, dict) and isinstance(raw.get("experiment"), dict):
        if args.seed is not None:
            raw["experiment"]["seed"] = args.seed
        if args.out is not None:
            raw["experiment"]["out"] = args.out
    if isinstance(raw, dict):
        if args.workers is not None:
            raw["workers"] = args.workers
        if args.cache is not None:
            raw["cache"] = args.cache
    try:
        cfg = load_config(raw)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    spec = cfg["spec"]
    out = spec.out or "loggas-out"
    cache = JsonCache(cfg["cache"]) if cfg["cache"] else None
    try:
        report = run_command(cfg["command"], spec, cfg["workers"], cache, out, cfg["save_samples"])
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except LogGasError as exc:
        print(f"error: numerical failure in {_origin(exc)}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    report.write(out)
    if cfg["verbosity"] > 0:
        print(summary_table(report))
        print(f"wrote {Path(out) / 'report.csv'} and {Path(out) / 'summary.json'}")
    if cfg["command"] == "audit" and not report.passed:
        return EXIT_THRESHOLD
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
