"""Acceptance criteria, one test each, with every tolerance pinned here.

Criteria 5-7 are long Monte Carlo runs. They are read from ``runs/<name>``
(written by the scripts in ``scripts/``) after checking that the stored spec
is exactly the pinned one; every pass/fail is then recomputed from
``report.csv``, not taken from the stored summary. A missing artifact, or
LOGGAS_RERUN=1, reruns the experiment here. Each test prints one line in the
terminal summary.
"""
import csv
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from loggas.electrostatics import (electric_field, next_order_energy, renormalized_energy_field_form,
                                   splitting_check)
from loggas.equilibrium import Potential, blow_up, solve_equilibrium
from loggas.fluctuations import LaplaceExpansion, TestFunction, h_half_norm, h_half_norm_halfplane, mean_against
from loggas.harness import (ExperimentSpec, _jsonable, clt_experiment, inequality_audit,
                            local_law_experiment, uniform_fluct_experiment)
from loggas.sampler import McmcParams, ReplicaSpec, sample_replicas, sample_tridiagonal
from loggas.transport import solve_transport

RUNS = Path(__file__).resolve().parents[1] / "runs"
SEED = 20240601

# pinned tolerances
TOL = {
    "rho0": 1e-3, "el_bulk": 1e-3, "eq_seconds": 10,
    "psi_exact": 1e-6, "bump_residual": 1e-4, "transport_seconds": 5,
    "splitting_per_n": 1e-3, "field_vs_sum": 0.01, "kappa_zeta": 1e-10, "identity_seconds": 300,
    "laplace_rel": 1e-4, "laplace_seconds": 120,
    "var_rel": 0.10, "var_sigmas": 3.0, "ks_alpha": 0.01, "mean_sigmas": 3.0, "clt_seconds": 1800,
    "p99_slope": 0.1, "local_law_seconds": 2700,
    "audit_slope": 0.1, "audit_seconds": 1800,
    "crosscheck_alpha": 0.01,
    "h_half_rel": 0.01, "rescale": 1e-6,
}

SPECS = {
    "clt": ExperimentSpec(betas=(1.0, 2.0, 4.0), ns=(1024,), replicas=2000,
                          scales=(0.25, "N^-1/4", "N^-1/2"), seed=SEED),
    "local_law": ExperimentSpec(betas=(2.0,), ns=(1024,), replicas=500,
                                window_scales=(16, 32, 64, 128, 256), calibration=50, seed=SEED),
    "audit": ExperimentSpec(betas=(2.0,), ns=(1024,), replicas=500, window_scales=(16, 32, 64, 128),
                            scales=(0.25, "N^-1/4", "N^-1/2"), order=6, seed=SEED),
}
RUNNERS = {"clt": clt_experiment, "local_law": local_law_experiment, "audit": inequality_audit}

RESULTS = {}


def record(k, ok, detail):
    RESULTS[k] = (bool(ok), detail)
    return ok


@pytest.fixture(scope="module", autouse=True)
def criterion_lines(request):
    yield
    tr = request.config.pluginmanager.get_plugin("terminalreporter")
    lines = [f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}" for k, (ok, detail) in sorted(RESULTS.items())]
    if tr is not None:
        tr.write_line("")
        for line in lines:
            tr.write_line(line)
    else:
        print("\n".join(lines))


def artifact(name):
    spec = SPECS[name]
    out = RUNS / name
    if os.environ.get("LOGGAS_RERUN") == "1" or not (out / "summary.json").exists():
        RUNNERS[name](spec).write(out)
    summary = json.loads((out / "summary.json").read_text())
    pinned = json.loads(json.dumps(_jsonable(spec.to_dict(io=False))))
    assert summary["spec"] == pinned, f"runs/{name} was produced with a different spec; rerun it"
    rows = list(csv.DictReader((out / "report.csv").open()))
    seconds = json.loads((out / "timing.json").read_text())["seconds"]
    return rows, seconds


def num(row, key):
    return float(row[key])


# ----------------------------------------------------------------------------


def test_criterion_01_equilibrium():
    t0 = time.perf_counter()
    V = Potential.quadratic()
    errs = []
    for method in ("analytic-one-cut", "discretized-minimization"):
        eq = solve_equilibrium(V, method=method)
        x = np.linspace(*eq.bulk()[0], 201)
        errs.append((abs(eq.density(np.array([0.0]))[0] - 2 / np.pi), float(np.max(np.abs(eq.effective_potential(x))))))
    secs = time.perf_counter() - t0
    ok = all(r <= TOL["rho0"] and e <= TOL["el_bulk"] for r, e in errs) and secs < TOL["eq_seconds"]
    record(1, ok, f"|rho(0)-2/pi| = {max(r for r, _ in errs):.1e}, bulk EL residual = "
                  f"{max(e for _, e in errs):.1e}, {secs:.1f} s")
    assert ok


def test_criterion_02_transport():
    eq = solve_equilibrium(Potential.quadratic())
    x = np.linspace(-1, 1, 401)
    secs = []
    t0 = time.perf_counter()
    lin = solve_transport(TestFunction.polynomial([0.0, 1.0]), eq)
    secs.append(time.perf_counter() - t0)
    e1 = float(np.max(np.abs(lin(x) + 0.5)))
    t0 = time.perf_counter()
    quad = solve_transport(TestFunction.polynomial([0.0, 0.0, 1.0]), eq)
    secs.append(time.perf_counter() - t0)
    e2 = max(float(np.max(np.abs(quad(x) + x / 2))), abs(quad.c_xi + 0.5))
    t0 = time.perf_counter()
    bump = solve_transport(TestFunction.bump(0.1, 0.2), eq, check=False)
    secs.append(time.perf_counter() - t0)
    ok = (e1 <= TOL["psi_exact"] and e2 <= TOL["psi_exact"] and bump.residual <= TOL["bump_residual"]
          and max(secs) < TOL["transport_seconds"])
    record(2, ok, f"xi=x err {e1:.1e}, xi=x^2 err {e2:.1e}, bump residual {bump.residual:.1e}, "
                  f"slowest {max(secs):.1f} s")
    assert ok


def test_criterion_03_identities():
    t0 = time.perf_counter()
    V = Potential.quadratic()
    eq = solve_equilibrium(V)
    rng = np.random.default_rng(3)
    split = 0.0
    for k in range(100):
        n = int(rng.integers(2, 257))
        x = sample_tridiagonal(n, float(rng.choice([1.0, 2.0, 4.0])), 500 + k).points
        split = max(split, abs(splitting_check(x, V, eq)) / n)
    field = 0.0
    for n in (2, 8, 32, 64):
        for seed in range(3):
            xb = n * sample_tridiagonal(n, 2.0, 900 + seed).points
            mu = blow_up(eq, n)
            s = next_order_energy(xb, mu).total
            f = renormalized_energy_field_form(xb, mu, order=8).total
            field = max(field, abs(f - s) / abs(s))
    n = 128
    xb = n * sample_tridiagonal(n, 2.0, 4).points
    mu = blow_up(eq, n)
    kz = 0.0
    for a, h in ((0.3, 2.0), (-10.0, 0.7), (40.0, 5.0)):
        ex, ey = electric_field(xb, mu, (a, h))
        k, z = TestFunction.kappa(a, h), TestFunction.zeta(a, h)
        fk = np.sum(k(xb)) - mu.integrate(k, rtol=1e-14, M=4096)
        fz = np.sum(z(xb)) - mu.integrate(z, rtol=1e-14, M=4096)
        kz = max(kz, abs(ex - fk / (2 * np.pi)), abs(ey - fz / (2 * np.pi)))
    secs = time.perf_counter() - t0
    ok = (split <= TOL["splitting_per_n"] and field <= TOL["field_vs_sum"] and kz <= TOL["kappa_zeta"]
          and secs < TOL["identity_seconds"])
    record(3, ok, f"splitting/N {split:.1e}, field vs sum {field:.1e}, kappa/zeta {kz:.1e}, {secs:.0f} s")
    assert ok


def _two_point(eq, V, xi, s, beta):
    from scipy.special import roots_legendre
    gl, gw = roots_legendre(12)

    def comp(lo, hi, k):
        e = np.linspace(lo, hi, k + 1)
        h = (hi - lo) / k
        return (0.5 * (e[:-1, None] + e[1:, None]) + 0.5 * h * gl).ravel(), np.tile(0.5 * h * gw, k)

    m, wm = comp(-2.5, 2.5, 40)
    u, wu = comp(0.0, 5.0, 40)
    M, U = np.meshgrid(m, u, indexing="ij")
    X = np.stack([M.ravel() - U.ravel() / 2, M.ravel() + U.ravel() / 2], axis=1)
    W = np.outer(wm, wu).ravel()
    p = np.abs(X[:, 0] - X[:, 1]) ** beta * np.exp(-2 * beta * V(X).sum(axis=1))
    Z = W @ p
    lhs = W @ (p * np.exp(s * (xi(X).sum(axis=1) - 2 * mean_against(xi, eq)))) / Z
    le = LaplaceExpansion(eq, V, xi, solve_transport(xi, eq), s, beta, 2)
    e2, e3 = le.errors(X)
    rhs = np.exp(-beta * 4 * le.main1 + 2 * le.error1) * (W @ (p * np.exp(-beta * (e2 + e3)))) / Z
    return lhs, rhs


def test_criterion_04_laplace_identity():
    t0 = time.perf_counter()
    V = Potential.quadratic()
    eq = solve_equilibrium(V)
    worst, done, excluded = 0.0, 0, []
    for xi in (TestFunction.bump(0.0, 0.5), TestFunction.polynomial([0.0, 0.0, 1.0])):
        sup = solve_transport(xi, eq).sup_derivative(1)
        for beta in (1.0, 2.0, 4.0):
            for s in (-1.0, 0.5, 1.0):
                # the identity presumes |t psi'| < 1/2 with t = -s / (2 beta)
                if abs(s) / (2 * beta) * sup >= 0.5:
                    excluded.append(f"{xi.kind} beta={beta:g} s={s:g}")
                    continue
                lhs, rhs = _two_point(eq, V, xi, s, beta)
                worst = max(worst, abs(rhs / lhs - 1))
                done += 1
    secs = time.perf_counter() - t0
    ok = worst <= TOL["laplace_rel"] and secs < TOL["laplace_seconds"] and done >= 15
    record(4, ok, f"max relative gap {worst:.1e} over {done} (xi, beta, s) cases, {secs:.0f} s"
                  + (f"; outside |t psi'| < 1/2: {', '.join(excluded)}" if excluded else ""))
    assert ok


def test_criterion_05_clt():
    rows, secs = artifact("clt")
    fails = []
    for r in rows:
        tag = f"beta={r['beta']},L={r['label']}"
        var, pred, sd = num(r, "variance"), num(r, "predicted_variance"), num(r, "variance_boot_sd")
        if not (abs(var / pred - 1) <= TOL["var_rel"] and abs(var - pred) <= TOL["var_sigmas"] * sd):
            fails.append(f"variance {tag}")
        if not num(r, "ks_p") > TOL["ks_alpha"]:
            fails.append(f"ks {tag}")
        if r["macroscopic"] == "true":
            if not abs(num(r, "mean") - num(r, "predicted_mean_literal")) <= TOL["mean_sigmas"] * num(r, "mean_se"):
                fails.append(f"mean {tag}")
    for beta in sorted({r["beta"] for r in rows}):
        group = sorted((r for r in rows if r["beta"] == beta), key=lambda r: -num(r, "scale"))
        for prev, cur in zip(group, group[1:]):
            half = 0.5 * (num(cur, "mean_ci_hi") - num(cur, "mean_ci_lo"))
            if abs(num(cur, "mean")) > abs(num(prev, "mean")) + half:
                fails.append(f"monotone mean beta={beta}")
    ok = not fails and secs < TOL["clt_seconds"] and len(rows) == 9
    # informational: the same mean check with the (1/2 - 1/beta) prefactor
    macro = [r for r in rows if r["macroscopic"] == "true"]
    corrected = sum(abs(num(r, "mean") - num(r, "predicted_mean_corrected")) <= TOL["mean_sigmas"] * num(r, "mean_se")
                    for r in macro)
    record(5, ok, f"{len(rows)} rows, {secs:.0f} s" + (f"; failed: {', '.join(fails)}" if fails else "")
           + f"; corrected-prefactor mean within 3 se: {corrected}/{len(macro)}")
    assert ok, fails


def test_criterion_06_local_law():
    rows, secs = artifact("local_law")
    Ls = np.array([num(r, "scale") for r in rows])
    p99 = np.array([num(r, "p99") for r in rows])
    slope = float(np.polyfit(np.log(Ls), np.log(p99), 1)[0]) if np.all(p99 > 0) else float("nan")
    ok = np.isfinite(slope) and abs(slope) < TOL["p99_slope"] and secs < TOL["local_law_seconds"]
    neg = sum(int(r["negative_count"]) for r in rows)
    # informational: the median trend and the shrinking p99 - median spread
    med = np.array([num(r, "median") for r in rows])
    med_slope = float(np.polyfit(np.log(Ls), np.log(med), 1)[0])
    spread_slope = float(np.polyfit(np.log(Ls), np.log(p99 - med), 1)[0])
    record(6, ok, f"p99 log-log slope {slope:+.3f} over L' = {sorted(set(Ls.astype(int).tolist()))}, "
                  f"C0_emp {num(rows[0], 'C0_emp'):.3g}, negative statistics {neg}, {secs:.0f} s; "
                  f"median slope {med_slope:+.3f}, p99-median slope {spread_slope:+.2f}")
    assert ok


def _growth(Ls, cs):
    # scales with no measured sample are dropped; at least 3 measured scales are required
    Ls, cs = np.asarray(Ls, dtype=float), np.asarray(cs, dtype=float)
    keep = np.isfinite(cs)
    Ls, cs = Ls[keep], cs[keep]
    if len(cs) < 3:
        return float("nan")
    if np.all(cs <= 0):
        return 0.0
    cs = np.maximum(cs, 1e-3 * np.max(cs))
    return float(np.polyfit(np.log(Ls), np.log(cs), 1)[0])


def test_criterion_07_audit():
    rows, secs = artifact("audit")
    by = {}
    for r in rows:
        by.setdefault(r["inequality"], []).append((num(r, "scale"), num(r, "constant")))
    slopes, bad = {}, []
    for name, seq in sorted(by.items()):
        Ls, cs = zip(*sorted(seq))
        slopes[name] = _growth(Ls, cs)
        if not (np.isfinite(slopes[name]) and slopes[name] < TOL["audit_slope"]):
            bad.append(f"{name} ({slopes[name]:+.2f})")
    required = {"discrepancy", "energy_estimate", "local_energy_control_field", "rough_l1"} | \
        {f"moment_k={k}" for k in range(1, 7)}
    missing = sorted(required - set(by))
    ok = not bad and not missing and secs < TOL["audit_seconds"]
    worst = max(slopes, key=lambda k: np.nan_to_num(slopes[k], nan=np.inf))
    record(7, ok, f"{len(by)} inequalities, largest slope {worst} {slopes[worst]:+.3f}, {secs:.0f} s"
                  + (f"; failed: {', '.join(bad + missing)}" if bad or missing else ""))
    assert ok


def test_criterion_08_sampler_crosscheck():
    n, beta, replicas = 64, 2.0, 400
    tri = sample_replicas(ReplicaSpec(n, beta, SEED, "tridiagonal"), replicas)
    mc = sample_replicas(ReplicaSpec(n, beta, SEED + 1, "mcmc", (0.0, 0.0, 1.0), McmcParams()), replicas)
    statistics = {"sum x^2": lambda x: np.sum(x**2), "sum cos 3x": lambda x: np.sum(np.cos(3 * x)),
                  "sum |x|": lambda x: np.sum(np.abs(x))}
    ps = {}
    for name, f in statistics.items():
        ps[name] = float(stats.ks_2samp([f(c.points) for c in tri], [f(c.points) for c in mc]).pvalue)
    ok = all(p > TOL["crosscheck_alpha"] for p in ps.values())
    record(8, ok, ", ".join(f"{k}: p={v:.3f}" for k, v in ps.items()))
    assert ok


def test_criterion_09_h_half():
    bumps = [TestFunction.bump(0.0, 1.0), TestFunction.bump(0.2, 0.3, p=2.0), TestFunction.bump(-0.1, 0.05, p=0.5)]
    rel = max(abs(h_half_norm(b) / h_half_norm_halfplane(b) - 1) for b in bumps)
    ref = h_half_norm(TestFunction.bump(0.0, 1.0))
    inv = max(abs(h_half_norm(TestFunction.bump(z, L)) - ref) for L in (1.0, 0.1, 0.01) for z in (-0.3, 0.0, 0.25))
    ok = rel <= TOL["h_half_rel"] and inv <= TOL["rescale"]
    record(9, ok, f"spectral vs half-plane {rel:.1e}, rescaling {inv:.1e}")
    assert ok


def test_criterion_10_determinism():
    small = {
        "clt": (clt_experiment, dict(ns=(256,), replicas=40, bootstrap=30, scales=(0.25, "N^-1/4"))),
        "local-law": (local_law_experiment, dict(ns=(256,), replicas=6, window_scales=(16, 32), calibration=3,
                                                 order=6, bootstrap=20)),
        "uniform": (uniform_fluct_experiment, dict(ns=(128,), replicas=40, scales=(0.25,), kernel_heights=(16,),
                                                   bootstrap=20)),
        "audit": (inequality_audit, dict(ns=(256,), replicas=6, window_scales=(16, 32), order=6,
                                         audit_functions=2, scales=(0.25,), bootstrap=20)),
    }
    same = {}
    for name, (fn, kw) in small.items():
        spec = ExperimentSpec.from_dict({**kw, "seed": 99})
        a, b = fn(spec, workers=1), fn(spec, workers=3)
        same[name] = (a.report_csv() == b.report_csv() and a.long_csv() == b.long_csv()
                      and a.summary_json() == b.summary_json())
    ok = all(same.values())
    record(10, ok, "workers 1 vs 3 byte-identical: " + ", ".join(f"{k}={v}" for k, v in same.items()))
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
