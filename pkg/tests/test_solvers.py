import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trafficpidl import physics as P
from trafficpidl import solvers as S
from trafficpidl.domain import make_grid


class Greenshields:
    """Parabolic flux used as a closed-form reference."""

    def __init__(self, u_max=1.0, rho_max=1.0):
        self.u_max, self.rho_max, self.eps = u_max, rho_max, 0.0

    def flux(self, rho):
        return self.u_max * np.asarray(rho) * (1 - np.asarray(rho) / self.rho_max)

    def flux_derivative(self, rho):
        return self.u_max * (1 - 2 * np.asarray(rho) / self.rho_max)


class Decreasing(Greenshields):
    def flux(self, rho):
        return 1.0 - np.asarray(rho)

    def flux_derivative(self, rho):
        return -np.ones_like(np.asarray(rho, dtype=float))


def test_critical_density_examples():
    # golden section on a flat peak resolves the argmax to about sqrt(machine eps)
    assert S.critical_density(Greenshields(rho_max=2.0)) == pytest.approx(1.0, abs=1e-7)
    fd = P.ThreeParamFD()
    rc = S.critical_density(fd)
    dense = np.linspace(0, 1, 200_001)
    assert rc == pytest.approx(dense[np.argmax(fd.flux(dense))], abs=1e-5)
    # Q' = 0 where y / sqrt(1 + y^2) = (b - a) / delta
    a, b = math.sqrt(1 + (fd.delta * fd.p) ** 2), math.sqrt(1 + (fd.delta * (1 - fd.p)) ** 2)
    s = (b - a) / fd.delta
    closed = fd.rho_max * (fd.p + s / math.sqrt(1 - s * s) / fd.delta)
    assert rc == pytest.approx(closed, abs=1e-7)
    assert rc == pytest.approx(0.32892, abs=1e-5)
    assert S.critical_density(Decreasing()) == 0.0


@given(a=st.floats(0, 1), b=st.floats(0, 1))
@settings(max_examples=60, deadline=None)
def test_godunov_flux_properties(a, b):
    fd = P.ThreeParamFD()
    assert S.godunov_flux(a, a, fd) == pytest.approx(float(fd.flux(a)), abs=1e-15)
    assert S.godunov_flux(0.0, b, fd) == pytest.approx(0.0, abs=1e-15)
    assert S.godunov_flux(a, 1.0, fd) == pytest.approx(0.0, abs=1e-15)
    # the interface flux never exceeds capacity
    assert S.godunov_flux(a, b, fd) <= float(fd.flux(S.critical_density(fd))) + 1e-15


def test_godunov_flux_clamps_and_counts():
    stats = S.SolverStats()
    fd = P.ThreeParamFD()
    assert S.godunov_flux(-0.1, 1.2, fd, stats=stats) == pytest.approx(0.0, abs=1e-15)
    assert stats.clamped == 2


def test_initial_condition_values():
    assert S.bell_density(0.5) == 0.9
    assert S.bell_density(0.0) == pytest.approx(0.1 + 0.8 * math.exp(-6.25), rel=1e-15)
    assert S.bell_density(0.0) == pytest.approx(0.10154, abs=5e-6)


def test_uniform_state_is_fixed_point():
    g = make_grid(1.0, 1.0, 40, 50)
    rho = S.solve_lwr(g, lambda x: np.full_like(x, 0.37), P.ThreeParamFD())
    assert np.max(np.abs(rho.values - 0.37)) <= 1e-12


def relative_drift(values, dx):
    mass = values.sum(axis=0) * dx
    return np.max(np.abs(mass - mass[0])) / mass[0]


def test_lwr_mass_conservation_full_horizon():
    g = make_grid(1.0, 3.0, 240, 960)
    rho = S.solve_lwr(g, S.bell_density, P.ThreeParamFD())
    assert relative_drift(rho.values, g.dx) <= 1e-12


def test_lwr_monotone_without_diffusion():
    g = make_grid(1.0, 1.0, 80, 80)
    rho = S.solve_lwr(g, S.bell_density, P.ThreeParamFD(eps=0.0)).values
    lo, hi = rho[:, 0].min(), rho[:, 0].max()
    assert rho.min() >= lo - 1e-14 and rho.max() <= hi + 1e-14


def test_self_convergence_ratio():
    fd = P.ThreeParamFD()
    final = {}
    for nx in (60, 120, 240):
        final[nx] = S.solve_lwr(make_grid(1.0, 3.0, nx, 8), S.bell_density, fd).values[:, -1]
    e1 = np.mean(np.abs(final[60] - S.coarsen(final[120])))
    e2 = np.mean(np.abs(final[120] - S.coarsen(final[240])))
    assert 1.6 <= e1 / e2 <= 2.4


def test_substep_budget_error_names_cfl():
    g = make_grid(1.0, 3.0, 240, 10)
    with pytest.raises(S.SolverConfigError, match="CFL"):
        S.solve_lwr(g, S.bell_density, P.ThreeParamFD(), config=S.SolverConfig(max_substeps=2))


def test_combined_cfl_bound():
    fd = P.ThreeParamFD()
    st_ = S.LWRStepper(fd, 1 / 240)
    rate = S.max_wave_speed(fd) * 240 + 2 * fd.eps * 240**2
    assert st_.max_dt() == pytest.approx(0.9 / rate, rel=1e-14)
    assert st_.max_dt() <= 0.9 * min(1 / 240 / S.max_wave_speed(fd), (1 / 240) ** 2 / (2 * fd.eps))
    assert st_.substeps_for(1 / 320) == math.ceil((1 / 320) / st_.max_dt())


def test_batched_stepper_matches_rows():
    fd = P.ThreeParamFD()
    st_ = S.LWRStepper(fd, 0.05)
    batch = np.random.default_rng(0).uniform(0, 1, (3, 20))
    joint = st_.advance(batch, 0.01)
    for k in range(3):
        assert np.array_equal(joint[k], st_.advance(batch[k], 0.01))


def test_open_boundary_zero_gradient_runs():
    g = make_grid(1.0, 0.5, 40, 20)
    rho = S.solve_lwr(g, S.bell_density, P.ThreeParamFD(), periodic=False)
    assert np.all(np.isfinite(rho.values)) and rho.values.min() >= 0


ARZ = P.GreenshieldsARZParams()


def test_arz_equilibrium_fixed_point():
    g = make_grid(1.0, 0.5, 30, 20)
    c = 0.4
    rho, u = S.solve_arz(g, lambda x: np.full_like(x, c), lambda x: np.full_like(x, float(ARZ.u_eq(c))), ARZ)
    assert np.max(np.abs(rho.values - c)) <= 1e-10
    assert np.max(np.abs(u.values - float(ARZ.u_eq(c)))) <= 1e-10


def test_arz_reference_setup():
    g = make_grid(1.0, 3.0, 240, 960)
    stats = S.SolverStats()
    rho, u = S.solve_arz(g, S.bell_density, lambda x: np.full_like(x, 0.5), ARZ, stats=stats)
    assert relative_drift(rho.values, g.dx) <= 1e-12
    assert u.values.min() >= 0 and u.values.max() <= 1.02 * 1.05
    assert stats.vacuum == 0


def test_arz_vacuum_floor_counted():
    stats = S.SolverStats()
    st_ = S.ARZStepper(ARZ, 0.1, stats=stats)
    rho = np.array([0.0, 0.5, 0.5, 0.5])
    out, _ = st_.advance(rho, np.full(4, 0.5), 0.01)
    assert stats.vacuum >= 1 and np.all(out >= 1e-8)


def test_coarsen():
    v = np.arange(8.0).reshape(4, 2)
    assert np.array_equal(S.coarsen(v), [[1, 2], [5, 6]])
    with pytest.raises(ValueError):
        S.coarsen(np.zeros((3, 1)))
