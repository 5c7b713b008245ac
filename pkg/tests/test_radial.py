import numpy as np
import pytest

from conemin import radial
from conemin.errors import DomainError, SolverError


@pytest.fixture(scope="module")
def profile_main():
    return radial.solve_radial(0.3, 0.45, 1.0, 1.0, tol=1e-8)


class TestIdentitySolution:
    def test_exact(self):
        p = radial.solve_radial(0.3, 0.3, 1.0, 1.0, tol=1e-8)
        assert np.max(np.abs(p.f - p.rho)) < 1e-10
        assert abs(p.shoot_coefficient - 1.0) < 1e-10

    def test_coth_identity(self):
        # identity solves the ODE because coth(r) - sinh r cosh r / sinh^2 r = 0
        rho = np.linspace(0.1, 2.0, 50)
        lhs = 1.0 / np.tanh(rho) - np.sinh(rho) * np.cosh(rho) / np.sinh(rho) ** 2
        assert np.max(np.abs(lhs)) < 1e-14


class TestMainProfile:
    def test_residual_bound(self, profile_main):
        assert profile_main.residual_bound <= 1e-8
        assert np.max(np.abs(profile_main.residual)) <= 1e-8

    def test_monotone(self, profile_main):
        assert np.all(profile_main.f_prime > 0)

    def test_boundary_values(self, profile_main):
        assert profile_main.f[0] < 1e-5
        assert abs(profile_main.f[-1] - 1.0) < 1e-12

    def test_below_linear_bound(self, profile_main):
        # f stays below the straight interpolant rho * R_target / R plus slack
        sel = profile_main.rho > 0.05
        assert np.all(profile_main.f[sel] <= profile_main.rho[sel] * 1.0 + 1e-6)

    def test_indicial_exponent(self, profile_main):
        k_fit = radial.indicial_exponent_fit(profile_main)
        assert abs(k_fit - 1.5) / 1.5 < 0.05

    def test_regression_values(self, profile_main):
        # frozen after the first verified run (residual + indicial checks above)
        f_half, _ = profile_main.interp(np.array([0.5]))
        assert abs(float(f_half[0]) - 0.3604572397) < 5e-8
        assert abs(profile_main.shoot_coefficient - 1.0401810930) < 5e-8

    def test_conformality_of_radial_solutions(self, profile_main):
        # the regular solutions of the reduced ODE are exactly the conformal
        # maps f' = k sinh f / sinh rho: the Hopf norm vanishes identically
        # (tolerance limited by the piecewise-linear profile interpolation)
        rho = np.linspace(0.05, 0.95, 40)
        assert np.max(profile_main.hopf_norm(rho)) < 1e-5
        k = profile_main.k
        f, fp = profile_main.interp(rho)
        assert np.max(np.abs(fp - k * np.sinh(f) / np.sinh(rho))) < 5e-5


class TestSolverContract:
    def test_halving_tol(self):
        for tol in (1e-7, 0.5e-7):
            p = radial.solve_radial(0.3, 0.45, 1.0, 1.0, tol=tol)
            assert p.residual_bound <= tol

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            radial.solve_radial(0.6, 0.3, 1.0, 1.0)
        with pytest.raises(DomainError):
            radial.solve_radial(0.3, 0.3, -1.0, 1.0)

    def test_multi_start_agreement(self):
        # shooting from different grids agrees (uniqueness probe at ODE level)
        p1 = radial.solve_radial(0.2, 0.4, 0.8, 0.9, tol=1e-7)
        p2 = radial.solve_radial(0.2, 0.4, 0.8, 0.9, tol=1e-9)
        f1, _ = p1.interp(np.array([0.3, 0.5, 0.7]))
        f2, _ = p2.interp(np.array([0.3, 0.5, 0.7]))
        assert np.max(np.abs(f1 - f2)) < 1e-6
