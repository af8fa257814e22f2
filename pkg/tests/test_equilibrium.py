import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loggas.cache import JsonCache
from loggas.equilibrium import (Potential, blow_up, energy, energy_functional, from_measure_data,
                                solve_equilibrium)
from loggas.errors import MultiCutDetected, NonConfining, NotAProbability
from loggas.measure import CellPiece


def test_semicircle_density_and_support(eq_quadratic):
    (a, b), = eq_quadratic.support
    assert a == pytest.approx(-1, abs=1e-10) and b == pytest.approx(1, abs=1e-10)
    assert eq_quadratic.density(np.array([0.0]))[0] == pytest.approx(2 / np.pi, abs=1e-3)
    assert eq_quadratic.measure.mass == pytest.approx(1, abs=1e-8)


def test_effective_potential_zero_on_support_positive_off(eq_quadratic):
    x = np.linspace(-0.95, 0.95, 41)
    assert np.max(np.abs(eq_quadratic.effective_potential(x))) < 1e-3
    z2, z3 = eq_quadratic.effective_potential(np.array([2.0, 3.0]))
    assert z3 > z2 > 0
    # |x| sqrt(x^2 - 1) - log(|x| + sqrt(x^2 - 1)) off [-1, 1]
    closed = 2 * np.sqrt(3) - np.log(2 + np.sqrt(3))
    assert z2 == pytest.approx(closed, abs=1e-6)


def test_discretized_matches_analytic(quadratic):
    eq = solve_equilibrium(quadratic, grid_size=4096, method="discretized-minimization")
    assert eq.density(np.array([0.0]))[0] == pytest.approx(2 / np.pi, abs=1e-3)
    x = np.linspace(*eq.bulk()[0], 51)
    assert np.max(np.abs(eq.effective_potential(x))) <= 1e-3
    off = np.concatenate([np.linspace(-2, -1.05, 20), np.linspace(1.05, 2, 20)])
    assert np.min(eq.effective_potential(off)) >= -1e-3


def test_el_residual_shrinks_with_grid(quadratic):
    r1 = solve_equilibrium(quadratic, 512, "discretized-minimization").grid_residual
    r2 = solve_equilibrium(quadratic, 1024, "discretized-minimization").grid_residual
    assert r2 <= 0.75 * r1


def test_non_confining():
    with pytest.raises(NonConfining):
        solve_equilibrium(Potential.polynomial([0.0]))


def test_double_well_is_multicut():
    with pytest.raises(MultiCutDetected):
        solve_equilibrium(Potential.polynomial([0.0, 0.0, -3.0, 0.0, 1.0]))


def test_user_supplied_semicircle(quadratic):
    eq = from_measure_data(quadratic, [(-1.0, 1.0)], [lambda x: 2 / np.pi + 0 * x])
    assert eq.density(np.array([0.5]))[0] == pytest.approx(2 / np.pi * np.sqrt(0.75), rel=1e-10)


def test_quartic_one_cut(eq_quartic):
    a, b = eq_quartic.endpoints
    assert a == pytest.approx(-b, abs=1e-10)
    x = np.linspace(*eq_quartic.bulk()[0], 31)
    assert np.max(np.abs(eq_quartic.effective_potential(x))) < 1e-8


def test_uniform_energy_three_quarters():
    piece = CellPiece(0.0, 1 / 256, np.ones(256))
    assert energy_functional(piece, lambda x: 0 * x) == pytest.approx(0.75, abs=1e-4)


def test_energy_rejects_bad_mass():
    with pytest.raises(NotAProbability):
        energy_functional(CellPiece(0.0, 1 / 100, 0.9 * np.ones(100)), lambda x: 0 * x)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_equilibrium_minimizes_energy(seed):
    rng = np.random.default_rng(seed)
    pot = Potential.quadratic()
    n = 400
    h = 2.4 / n
    mids = -1.2 + h * (np.arange(n) + 0.5)
    base = np.where(np.abs(mids) < 1, 2 / np.pi * np.sqrt(np.clip(1 - mids**2, 0, None)), 0.0)
    bump = np.exp(-((mids - rng.uniform(-1, 1)) / rng.uniform(0.05, 0.4)) ** 2)
    rho = np.clip(base + rng.uniform(-0.3, 0.3) * bump, 0, None)
    rho /= rho.sum() * h
    ref = energy_functional(CellPiece(-1.2, h, base / (base.sum() * h)), pot)
    assert energy_functional(CellPiece(-1.2, h, rho), pot) >= ref - 1e-9


def test_energy_of_semicircle(eq_quadratic):
    # 1/2 (log 2 + 1/4) from the log energy plus 1/4 from int x^2
    assert energy(eq_quadratic) == pytest.approx(0.375 + 0.5 * np.log(2), abs=1e-8)


def test_blow_up(eq_quadratic):
    assert blow_up(eq_quadratic, 1).mass == pytest.approx(1)
    mu = blow_up(eq_quadratic, 100)
    assert mu.mass == pytest.approx(100, rel=1e-6)
    assert mu.support[0] == pytest.approx((-100, 100))
    assert mu.density(np.array([0.0]))[0] == pytest.approx(eq_quadratic.density(np.array([0.0]))[0])


def test_cache_roundtrip(tmp_path, quadratic):
    cache = JsonCache(tmp_path)
    first = solve_equilibrium(quadratic, cache=cache)
    second = solve_equilibrium(quadratic, cache=cache)
    x = np.linspace(-0.9, 0.9, 7)
    assert np.array_equal(first.density(x), second.density(x))
    assert len(cache.inspect()) == 1
