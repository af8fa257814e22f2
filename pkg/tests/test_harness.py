import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loggas.errors import ValidationError, WindowOutsideBulk
from loggas.harness import (EXPERIMENTS, ExperimentSpec, bootstrap, clt_experiment, envelope_fit,
                            inequality_audit, local_law_experiment, log_laplace, loglog_slope,
                            resolve_scale, uniform_fluct_experiment)


def small(**kw):
    base = dict(ns=(256,), replicas=48, bootstrap=50, scales=(0.25, "N^-1/2"), seed=11)
    base.update(kw)
    return ExperimentSpec.from_dict(base)


# ------------------------------------------------------------------ spec


def test_resolve_scale():
    assert resolve_scale(0.25, 1024) == 0.25
    assert resolve_scale("N^-1/2", 1024) == pytest.approx(1 / 32)
    assert resolve_scale("N^(-1/4)", 256) == pytest.approx(0.25)
    with pytest.raises(ValidationError):
        resolve_scale("L/2", 64)


@pytest.mark.parametrize("bad,key", [
    ({"betas": [-1.0]}, "beta"),
    ({"betas": []}, "beta"),
    ({"ns": [1]}, "ns"),
    ({"sampler": "gibbs"}, "sampler"),
    ({"potential": [0, 0, 0.5, 0, 0.25]}, "sampler"),
    ({"scales": ["N^-1"]}, "scales"),
    ({"window_scales": [4]}, "window_scales"),
    ({"replicas": 1}, "replicas"),
    ({"thresholds": {"nope": 1}}, "thresholds.nope"),
    ({"mcmc": {"bogus": 3}}, "mcmc"),
    ({"s_grid": [1.0, 2.0]}, "s_grid"),
    ({"test_function": {"kind": "kappa"}}, "test_function.kind"),
    ({"frobnicate": 1}, "frobnicate"),
])
def test_spec_validation_names_key(bad, key):
    with pytest.raises(ValidationError) as exc:
        ExperimentSpec.from_dict(bad)
    assert exc.value.key == key


def test_spec_roundtrip():
    spec = small(out="/tmp/x")
    again = ExperimentSpec.from_dict(spec.to_dict())
    assert again == spec
    assert "out" not in spec.to_dict(io=False)
    json.dumps(spec.to_dict())


def test_quartic_needs_mcmc():
    spec = ExperimentSpec.from_dict({"potential": [0, 0, 0.5, 0, 0.25], "sampler": "mcmc"})
    assert spec.sampler == "mcmc"


# ------------------------------------------------------------ statistics


def test_bootstrap_covers_mean():
    rng = np.random.default_rng(0)
    hits = 0
    for k in range(200):
        v = rng.normal(size=100)
        lo, hi, _ = bootstrap(v, [np.mean], 200, seed=k)[0]
        hits += lo <= 0 <= hi
    assert 0.88 <= hits / 200 <= 0.99


def test_log_laplace_zero_and_conditioning():
    v = np.array([1.0, -2.0, 0.5, 3.0])
    assert log_laplace(v, np.ones(4, bool), 0.0) == 0.0
    good = np.array([True, True, False, True])
    assert log_laplace(v, good, 0.0) == pytest.approx(np.log(0.75))
    assert log_laplace(v, good, 1.0) == pytest.approx(np.log(np.mean(np.exp(v) * good)))


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 2), st.floats(0, 2), st.floats(0, 2))
def test_envelope_dominates(a, b, c):
    s = np.linspace(-2, 2, 21)
    target = a * np.abs(s) + b * s**2 + c * np.abs(s) ** 3
    coef = envelope_fit(s, target)
    fit = coef[0] * np.abs(s) + coef[1] * s**2 + coef[2] * np.abs(s) ** 3
    assert np.all(fit >= target - 1e-7)
    assert np.all(coef >= 0)


def test_loglog_slope():
    x = np.array([16, 32, 64, 128])
    assert loglog_slope(x, 3 * x**0.5) == pytest.approx(0.5)
    assert loglog_slope(x, np.ones(4)) == pytest.approx(0.0)
    assert np.isnan(loglog_slope(x, np.array([1.0, 0.0, 1.0, 1.0])))
    assert loglog_slope(np.array([5, 5]), np.array([1.0, 2.0])) == 0.0


# ----------------------------------------------------------- experiments


@pytest.fixture(scope="module")
def clt_small():
    return clt_experiment(small())


def test_clt_report_fields(clt_small):
    rows = clt_small.rows
    assert len(rows) == 2
    for r in rows:
        for key in ("mean", "variance", "skewness", "excess_kurtosis", "ks_stat", "ks_p",
                    "predicted_variance", "predicted_mean_literal", "variance_ci_lo", "variance_ci_hi",
                    "replicas"):
            assert key in r
        assert r["replicas"] == 48
        assert r["variance_ci_lo"] <= r["variance"] <= r["variance_ci_hi"]
        assert r["predicted_variance"] == pytest.approx(2 / 2.0 * r["h_half_sq"])
    for r in clt_small.long_rows:
        assert r["replicas"] is not None


def test_clt_literal_mean_prefactor():
    rep = clt_experiment(small(betas=(1.0,), scales=(0.25,), replicas=16))
    assert rep.rows[0]["predicted_mean_literal"] == 0.0


def test_clt_deterministic_across_workers(clt_small):
    again = clt_experiment(small(), workers=2)
    assert again.report_csv() == clt_small.report_csv()
    assert again.long_csv() == clt_small.long_csv()
    assert again.summary_json() == clt_small.summary_json()


def test_report_write(tmp_path, clt_small):
    out = clt_small.write(tmp_path / "r")
    assert {p.name for p in out.iterdir()} == {"report.csv", "long.csv", "summary.json", "timing.json"}
    summary = json.loads((out / "summary.json").read_text())
    assert summary["tolerances"]["var_rel_tol"] == 0.10
    assert "seconds" not in summary


def test_local_law_small():
    spec = small(replicas=6, window_scales=(16, 32), calibration=3, order=6, bootstrap=20)
    rep = local_law_experiment(spec)
    assert {r["scale"] for r in rep.rows} == {16, 32}
    for r in rep.rows:
        assert np.isfinite(r["p99"]) and r["replicas"] == 6
        assert r["C0_emp"] >= 0


def test_window_outside_bulk():
    spec = small(ns=(64,), scales=(0.25,), replicas=4, window_scales=(64,), centers=(0.9,), calibration=2)
    with pytest.raises(WindowOutsideBulk):
        local_law_experiment(spec)


def test_uniform_small():
    spec = small(ns=(128, 256), scales=(0.25,), replicas=40, kernel_heights=(16,), bootstrap=30)
    rep = uniform_fluct_experiment(spec)
    assert rep.rows
    at0 = [r for r in rep.long_rows if r["statistic"] == "log_laplace[s=0]"]
    assert len(at0) == len(rep.rows)
    for r, row in zip(at0, rep.rows):
        assert r["value"] == row["log_laplace_at_0"]
        if row["good_fraction"] == 1.0:
            assert r["value"] == 0.0
    checks = rep.summary["checks"]
    assert any(k.startswith("log_laplace_zero") for k in checks)
    assert all(v for k, v in checks.items() if k.startswith("log_laplace_zero"))


def test_audit_small():
    spec = small(replicas=6, window_scales=(16, 32), order=6, audit_functions=3, calibration=2)
    rep = inequality_audit(spec)
    names = {r["inequality"] for r in rep.rows}
    for required in ("discrepancy", "local_energy_control_field", "rough_l1", "energy_estimate", "moment_k=1"):
        assert required in names
    for r in rep.rows:
        if r["inequality"] == "discrepancy" and r["qualifying"] == 0:
            assert np.isnan(r["constant"])
        else:
            assert np.isfinite(r["constant"]) and r["constant"] >= 0


def test_registry():
    assert set(EXPERIMENTS) == {"clt", "local-law", "uniform", "audit"}
