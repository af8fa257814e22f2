import pytest

from loggas.equilibrium import Potential, solve_equilibrium


@pytest.fixture(scope="session")
def quadratic():
    return Potential.quadratic()


@pytest.fixture(scope="session")
def eq_quadratic(quadratic):
    return solve_equilibrium(quadratic)


@pytest.fixture(scope="session")
def eq_quartic():
    return solve_equilibrium(Potential.polynomial([0.0, 0.0, 0.5, 0.0, 0.25]))
