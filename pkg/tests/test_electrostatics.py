import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loggas.electrostatics import (discrepancy, electric_field, local_energy, local_minimal_distances,
                                   minimal_distances, next_order_energy, next_order_energy_global,
                                   renormalized_energy_field_form, splitting_check, truncation_function)
from loggas.equilibrium import blow_up
from loggas.errors import (CoincidentPoints, MassMismatch, SingularEvaluation, TruncationTooLarge,
                           WindowTooThin)
from loggas.fluctuations import TestFunction
from loggas.measure import lebesgue
from loggas.sampler import sample_tridiagonal

points = st.lists(st.floats(-20, 20, allow_nan=False, allow_subnormal=False), min_size=1, max_size=25, unique=True)


def test_minimal_distances_examples():
    assert np.allclose(minimal_distances(np.array([0.0, 0.4, 3.0])), [0.1, 0.1, 0.25])
    assert np.allclose(minimal_distances(np.array([0.0, 5.0])), [0.25, 0.25])
    assert np.allclose(minimal_distances(np.array([2.0])), [0.25])


def test_local_minimal_distances_examples():
    assert np.allclose(local_minimal_distances(np.array([0.1, 5.0, 5.2]), (0, 10)), [0.25, 0.05, 0.05])
    # the outside neighbour at 10.1 is ignored
    assert np.allclose(local_minimal_distances(np.array([5.0, 9.0, 10.1]), (0, 10))[:2], [0.25, 0.25])


@given(points, st.floats(-20, 0), st.floats(0.5, 20), st.floats(0, 0.45), st.floats(0, 0.45))
def test_shrinking_window_never_decreases(xs, lo, hi, f1, f2):
    x = np.sort(np.array(xs))
    w = hi - lo
    inner = (lo + f1 * w, hi - f2 * w)
    big = local_minimal_distances(x, (lo, hi))
    small = local_minimal_distances(x, inner)
    sel = (x >= inner[0]) & (x <= inner[1])
    assert np.all(small[sel] >= big[sel] - 1e-15)


@given(points)
def test_minimal_distances_bounds(xs):
    r = minimal_distances(np.array(xs))
    assert np.all(r > 0) and np.all(r <= 0.25)


def test_truncation_function_examples():
    assert truncation_function(0.25, 0.5) == 0
    assert truncation_function(0.25, 0.1) == pytest.approx(np.log(2.5))
    assert truncation_function(0.25, 0.25) == 0
    assert truncation_function(0.25, 0.0) == np.inf


def test_two_points_on_lebesgue():
    e = next_order_energy(np.array([0.5, 1.5]), lebesgue(0, 2))
    assert e.total == pytest.approx(-1.8630, abs=1e-4)
    assert e.total == pytest.approx(0.5 * (e.pair_sum + e.cross_term + e.background_term), abs=1e-14)


def test_mass_mismatch_and_coincidence():
    with pytest.raises(MassMismatch):
        next_order_energy(np.array([0.5, 1.5, 1.7]), lebesgue(0, 2))
    with pytest.raises(CoincidentPoints):
        next_order_energy(np.array([0.5, 0.5]), lebesgue(0, 2))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_translation_invariance(eq_quadratic, seed, shift):
    x = 16 * sample_tridiagonal(16, 2.0, seed).points
    mu = blow_up(eq_quadratic, 16)
    a = next_order_energy(x, mu).total
    b = next_order_energy(x + shift, mu.shifted(shift)).total
    assert b == pytest.approx(a, abs=1e-10)


def test_splitting_formula(quadratic, eq_quadratic):
    rng = np.random.default_rng(0)
    worst = 0.0
    for k in range(100):
        n = int(rng.integers(1, 257))
        x = sample_tridiagonal(n, float(rng.choice([1.0, 2.0, 4.0])), k).points
        worst = max(worst, abs(splitting_check(x, quadratic, eq_quadratic)) / n)
    assert worst <= 1e-3
    assert abs(splitting_check(np.array([0.3]), quadratic, eq_quadratic)) <= 1e-6


def test_global_energy_offset(eq_quadratic):
    x = sample_tridiagonal(50, 2.0, 1).points
    e = next_order_energy_global(x, eq_quadratic)
    assert e.meta["F_N"] == pytest.approx(e.total - 25 * np.log(50))


def test_field_identity_with_kappa_zeta(eq_quadratic):
    n = 128
    x = n * sample_tridiagonal(n, 2.0, 3).points
    mu = blow_up(eq_quadratic, n)
    for a, h in ((0.3, 2.0), (-10.0, 0.7), (40.0, 5.0)):
        ex, ey = electric_field(x, mu, (a, h))
        k, z = TestFunction.kappa(a, h), TestFunction.zeta(a, h)
        fk = np.sum(k(x)) - mu.integrate(k, rtol=1e-14, M=4096)
        fz = np.sum(z(x)) - mu.integrate(z, rtol=1e-14, M=4096)
        assert ex == pytest.approx(fk / (2 * np.pi), abs=1e-10)
        assert ey == pytest.approx(fz / (2 * np.pi), abs=1e-10)


def test_singular_evaluation():
    with pytest.raises(SingularEvaluation):
        electric_field(np.array([0.5, 1.5]), lebesgue(0, 2), (0.5, 0.0))


def test_dipole_far_field():
    # two charges on their own neutralising background: net charge 0
    x = np.array([0.3, 1.6])
    mu = lebesgue(0, 2)
    R = np.array([40.0, 80.0, 160.0, 320.0])
    mags = [np.hypot(*electric_field(x, mu, (1.0 + r / np.sqrt(2), r / np.sqrt(2)))) for r in R]
    slope = np.polyfit(np.log(R), np.log(mags), 1)[0]
    assert abs(slope + 2) < 0.2


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([2, 8, 32, 64]))
def test_field_form_matches_sum_form(eq_quadratic, seed, n):
    x = n * sample_tridiagonal(n, 2.0, seed).points
    mu = blow_up(eq_quadratic, n)
    s = next_order_energy(x, mu).total
    f = renormalized_energy_field_form(x, mu, order=8).total
    assert abs(f - s) <= 0.01 * abs(s)


def test_two_points_field_form():
    f = renormalized_energy_field_form(np.array([0.5, 1.5]), lebesgue(0, 2), order=8)
    assert f.total == pytest.approx(-1.863046, abs=1e-4)


def test_monotone_in_truncation(eq_quadratic):
    n = 16
    x = n * sample_tridiagonal(n, 2.0, 5).points
    mu = blow_up(eq_quadratic, n)
    r = minimal_distances(x)
    small = renormalized_energy_field_form(x, mu, 0.5 * r, order=8).total
    full = renormalized_energy_field_form(x, mu, r, order=8).total
    assert full <= small + 1e-4


def test_truncation_too_large(eq_quadratic):
    x = 8 * sample_tridiagonal(8, 2.0, 5).points
    with pytest.raises(TruncationTooLarge):
        renormalized_energy_field_form(x, blow_up(eq_quadratic, 8), 2 * minimal_distances(x))


def test_empty_window_energy_nonnegative(eq_quadratic):
    mu = blow_up(eq_quadratic, 64)
    e = local_energy(np.array([-30.0, 30.0]), mu, (-5.0, 5.0))
    assert e.count == 0 and e.total >= 0 and e.self_energy_sum == 0


def test_local_energy_refinement(eq_quadratic):
    n = 256
    x = n * sample_tridiagonal(n, 2.0, 8).points
    mu = blow_up(eq_quadratic, n)
    vals = [local_energy(x, mu, (-16.0, 16.0), order=o).total for o in (4, 6, 8, 10)]
    assert abs(vals[3] - vals[2]) <= 0.01 * abs(vals[3])


def test_local_energy_control(eq_quadratic):
    n = 512
    mu = blow_up(eq_quadratic, n)
    c_field, c_self = [], []
    for s in range(12):
        x = n * sample_tridiagonal(n, 2.0, 100 + s).points
        e = local_energy(x, mu, (-20.0, 20.0), order=6)
        c_field.append((e.field_integral - 8 * np.pi * e.total) / e.count)
        c_self.append((e.self_energy_sum - 2 * e.total) / e.count)
    # constants exist and do not blow up across samples
    assert np.std(c_field) < 0.2 * abs(np.mean(c_field))
    assert np.std(c_self) < 0.2 * abs(np.mean(c_self))


def test_window_too_thin(eq_quadratic):
    mu = blow_up(eq_quadratic, 64)
    x = 64 * sample_tridiagonal(64, 2.0, 1).points
    with pytest.raises(WindowTooThin):
        local_energy(x, mu, (-5.0, 5.0), L=0.01)


def test_discrepancy_examples():
    mu = lebesgue(0, 3)
    x = np.array([0.2, 0.5, 0.9])
    assert discrepancy(x, lebesgue(0, 2.5), (0, 2.5)) == pytest.approx(0.5)
    assert discrepancy(x, mu, (0, 3)) == pytest.approx(0)
    assert discrepancy(x, mu, (1.0, 1.0)) == 0
    assert discrepancy(np.array([0.1, 0.5, 0.9]), lebesgue(0, 2.5), (0, 1)) == pytest.approx(2.0)
