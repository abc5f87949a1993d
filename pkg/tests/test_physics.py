import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trafficpidl import autodiff as ad
from trafficpidl import neural as N
from trafficpidl import physics as P
from trafficpidl import solvers as S
from trafficpidl.domain import DomainPoint, make_grid

fd_params = st.builds(
    P.ThreeParamFD,
    delta=st.floats(0.5, 20), p=st.floats(0.05, 0.95), sigma=st.floats(0.01, 5), rho_max=st.floats(0.2, 3),
    eps=st.just(0.0),
)


@given(fd=fd_params)
@settings(max_examples=50, deadline=None)
def test_flux_vanishes_at_empty_and_jam(fd):
    assert abs(fd.flux(0.0)) <= 1e-12 * fd.sigma * (1 + fd.delta)
    assert abs(fd.flux(fd.rho_max)) <= 1e-12 * fd.sigma * (1 + fd.delta)


def test_flux_reference_value():
    # 40-digit decimal evaluation: sqrt(101) + (sqrt(26) - sqrt(101)) / 2 - sqrt(57.25)
    fd = P.ThreeParamFD(delta=5, p=2, sigma=1, rho_max=1, eps=0)
    assert P.flux_three_param(0.5, fd) == pytest.approx(0.008074592146059587, rel=1e-12)
    a, b, y = math.sqrt(101), math.sqrt(26), -7.5
    assert fd.flux(0.5) == pytest.approx(a + (b - a) * 0.5 - math.sqrt(1 + y * y), rel=1e-12)


@given(fd=fd_params, r=st.floats(0.01, 0.99))
@settings(max_examples=50, deadline=None)
def test_flux_derivative_matches_differences(fd, r):
    rho, h = r * fd.rho_max, 1e-6 * fd.rho_max
    num = (fd.flux(rho + h) - fd.flux(rho - h)) / (2 * h)
    scale = fd.sigma * fd.delta / fd.rho_max
    assert abs(fd.flux_derivative(rho) - num) <= 1e-8 * max(1.0, scale)


def test_greenshields_speed():
    par = P.GreenshieldsARZParams()
    assert P.speed_greenshields(0.0, par) == 1.02
    assert P.speed_greenshields(1.13, par) == 0.0
    assert P.speed_greenshields(0.565, par) == pytest.approx(0.51, rel=1e-15)
    assert par.hesitation(par.rho_max) == pytest.approx(par.u_max, rel=1e-15)


def test_invalid_parameters_rejected():
    for kw in ({"sigma": 0}, {"rho_max": -1}, {"eps": -0.1}, {"delta": 0}):
        with pytest.raises(ValueError):
            P.ThreeParamFD(**kw)
    with pytest.raises(ValueError):
        P.GreenshieldsARZParams(tau=0)


def constant_net(c, n_out=1, n_in=2):
    net = N.mlp_new((n_in, 4, n_out), "tanh", init="zeros", seed=0)
    flat = np.array(net.flat)
    flat[-n_out:] = c
    return net.bind(flat)


def test_constant_net_has_zero_lwr_residual():
    net = constant_net(0.4)
    pts = np.random.default_rng(0).uniform([0, 0], [1, 3], (6, 2))
    assert np.all(P.residual_lwr3(net, P.ThreeParamFD(), pts).r_rho == 0)


def test_linear_in_x_net_at_critical_density():
    fd = P.ThreeParamFD(eps=0.0)
    rho_c = S.critical_density(fd)
    # f = rho_c + k (x - x0) + w t, evaluated at x = x0, t = 0 where Q'(f) = 0
    k, w, x0 = 0.3, -0.2, 0.5
    net = N.mlp_new((2, 1), "identity", seed=0).bind(np.array([k, w, rho_c - k * x0]))
    r = P.residual_lwr3(net, fd, np.array([[x0, 0.0]])).r_rho
    assert abs(fd.flux_derivative(rho_c)) < 1e-6
    assert r[0] == pytest.approx(w + fd.flux_derivative(rho_c) * k, abs=1e-15)
    assert r[0] == pytest.approx(w, abs=1e-6)


def fd_residual_lwr(net, fd, x, t, h=1e-4):
    f = lambda a, b: float(net.forward(np.array([a, b]))[0])
    rho = f(x, t)
    rx = (f(x + h, t) - f(x - h, t)) / (2 * h)
    rt = (f(x, t + h) - f(x, t - h)) / (2 * h)
    rxx = (f(x + h, t) - 2 * rho + f(x - h, t)) / h**2
    return rt + fd.flux_derivative(rho) * rx - fd.eps * rxx


@pytest.mark.parametrize("seed", [0, 1])
def test_lwr_residual_matches_finite_differences(seed):
    net = N.punn(seed, 1, 3, hidden=(20, 20, 20))
    fd = P.ThreeParamFD()
    pts = np.random.default_rng(seed).uniform([0, 0], [1, 3], (5, 2))
    r = P.residual_lwr3(net, fd, pts).r_rho
    for k, (x, t) in enumerate(pts):
        ref = fd_residual_lwr(net, fd, x, t)
        assert abs(r[k] - ref) <= 1e-5 * max(abs(ref), 1e-2)


def test_arz_equilibrium_state_has_zero_residual():
    par = P.GreenshieldsARZParams()
    c = 0.3
    net = constant_net([c, float(par.u_eq(c))], n_out=2)
    res = P.residual_arz(net, None, par, np.array([[0.2, 0.5], [0.7, 2.0]]))
    assert np.allclose(res.r_rho, 0, atol=1e-15) and np.allclose(res.r_u, 0, atol=1e-12)


def test_arz_residual_matches_finite_differences():
    par = P.GreenshieldsARZParams()
    net = N.punn(4, 1, 3, n_out=2, hidden=(12, 12))
    pts = np.array([[0.3, 0.4], [0.8, 2.2]])
    res = P.residual_arz(net, None, par, pts)
    h = 1e-5
    for k, (x, t) in enumerate(pts):
        f = lambda a, b: net.forward(np.array([a, b]))
        rho, u = f(x, t)
        d_x = (f(x + h, t) - f(x - h, t)) / (2 * h)
        d_t = (f(x, t + h) - f(x, t - h)) / (2 * h)
        hp = par.u_max / par.rho_max
        r_rho = d_t[0] + d_x[0] * u + rho * d_x[1]
        r_u = d_t[1] + hp * d_t[0] + u * (d_x[1] + hp * d_x[0]) - (par.u_eq(rho) - u) / par.tau
        assert res.r_rho[k] == pytest.approx(r_rho, rel=1e-5, abs=1e-8)
        assert res.r_u[k] == pytest.approx(r_u, rel=1e-5, abs=1e-8)


def test_two_networks_equal_one_stacked_network():
    par = P.GreenshieldsARZParams()
    net_r, net_u = N.punn(1, hidden=(6,)), N.punn(2, hidden=(6,))
    pts = np.array([[0.1, 0.1], [0.6, 1.4]])
    res = P.residual_arz(net_r, net_u, par, pts)
    f = lambda n, a, b: float(n.forward(np.array([a, b]))[0])
    h = 1e-5
    x, t = pts[1]
    rho, u = f(net_r, x, t), f(net_u, x, t)
    rt = (f(net_r, x, t + h) - f(net_r, x, t - h)) / (2 * h)
    rx = (f(net_r, x + h, t) - f(net_r, x - h, t)) / (2 * h)
    ux = (f(net_u, x + h, t) - f(net_u, x - h, t)) / (2 * h)
    assert res.r_rho[1] == pytest.approx(rt + rx * u + rho * ux, rel=1e-6)


def test_fdl_residual_zero_and_linear_surrogate():
    net = N.punn(0, hidden=(8, 8))
    pts = np.array([[0.25, 1.0], [0.75, 2.0]])
    jet = net.jet(pts).column(0)
    zero = N.fd_surrogate(0, hidden=(4,))
    zero = zero.bind(np.zeros(zero.n_params))
    assert np.array_equal(P.residual_lwr_fdl(net, zero, pts).r_rho, ad.value_of(jet.d1["t"]).ravel())
    v = 0.7
    # inputs rescaled from [0, 1] to [-1, 1], so a weight v/2 yields q = v rho + const
    linear = N.mlp_new((1, 1), "identity", seed=0, input_lower=(0.0,), input_upper=(1.0,),
                       input_names=("rho",)).bind(np.array([v / 2, 0.0]))
    r = P.residual_lwr_fdl(net, linear, pts).r_rho
    expect = ad.value_of(jet.d1["t"]).ravel() + v * ad.value_of(jet.d1["x"]).ravel()
    assert np.allclose(r, expect, rtol=1e-14)


def test_fitted_surrogate_reproduces_lwr_residual():
    fd = P.ThreeParamFD(eps=0.0)
    sur = P.fit_surrogate_to_flux(fd, N.fd_surrogate(0, hidden=(20, 20)), iterations=3000, lr=5e-3)
    rho = np.linspace(0, 1, 101).reshape(-1, 1)
    fit_err = float(np.max(np.abs(sur.forward(rho) - np.asarray(fd.flux(rho)))))
    net = N.punn(1, hidden=(10, 10))
    pts = np.random.default_rng(3).uniform([0, 0], [1, 3], (20, 2))
    r_fdl = P.residual_lwr_fdl(net, sur, pts).r_rho
    r_ref = P.residual_lwr3(net, fd, pts).r_rho
    jet = net.jet(pts).column(0)
    rho = ad.value_of(jet.value).reshape(-1, 1)
    rho_x = ad.value_of(jet.d1["x"]).ravel()
    h = 1e-6
    q_prime = ((sur.forward(rho + h) - sur.forward(rho - h)) / (2 * h)).ravel()
    # the two residuals differ exactly by (q' - Q') rho_x
    assert fit_err < 5e-3
    expect = (q_prime - fd.flux_derivative(rho.ravel())) * rho_x
    assert np.allclose(r_fdl - r_ref, expect, rtol=1e-5, atol=1e-8)


def test_param_packing_round_trip_and_log_space():
    fd = P.ThreeParamFD()
    names = ("delta", "rho_max", "eps")
    raw = P.pack_params(fd, names)
    assert raw[2] == pytest.approx(math.log(0.005))
    back = P.unpack_params(fd, names, raw)
    assert P.params_as_floats(back) == pytest.approx(P.params_as_floats(fd), rel=1e-14)


def test_residual_self_consistency_improves_with_resolution():
    fd = P.ThreeParamFD()
    errs = []
    for nx in (60, 120):
        grid = make_grid(1.0, 1.0, nx, 4 * nx)
        rho = S.solve_lwr(grid, S.bell_density, fd).values
        dx, dt = grid.dx, grid.dt
        r_t = (rho[:, 2:] - rho[:, :-2]) / (2 * dt)
        mid = rho[:, 1:-1]
        Q = np.asarray(fd.flux(mid))
        Q_x = (np.roll(Q, -1, 0) - np.roll(Q, 1, 0)) / (2 * dx)
        r_xx = (np.roll(mid, -1, 0) - 2 * mid + np.roll(mid, 1, 0)) / dx**2
        errs.append(float(np.mean(np.abs(r_t + Q_x - fd.eps * r_xx))))
    assert errs[1] < errs[0]


def test_domain_point_accepted():
    net = constant_net(0.2)
    assert P.residual_lwr3(net, P.ThreeParamFD(), DomainPoint(0.5, 1.0)).r_rho.shape == (1,)
