"""Shared argument handling for the experiment scripts."""
import argparse
import time
from pathlib import Path

from loggas.cache import JsonCache
from loggas.cli import summary_table


def parser(description, replicas):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--replicas", type=int, default=replicas)
    p.add_argument("--seed", type=int, default=20240601)
    p.add_argument("--cache", default=".loggas-cache")
    return p


def run(fn, spec, args, name):
    t0 = time.perf_counter()
    report = fn(spec, workers=args.workers, cache=JsonCache(args.cache) if args.cache else None)
    out = Path(args.out or f"runs/{name}")
    report.write(out)
    print(summary_table(report, limit=60))
    print(f"{name}: {'PASS' if report.passed else 'FAIL'} in {time.perf_counter() - t0:.0f} s -> {out}")
    return report
