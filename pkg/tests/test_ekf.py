import numpy as np
import pytest

from trafficpidl import ekf as E
from trafficpidl import metrics as M
from trafficpidl import physics as P
from trafficpidl import solvers as S
from trafficpidl.domain import ObservationSet, make_grid, sample_loop_detectors


class LinearFlux:
    """``Q = v rho``: Godunov reduces to first-order upwind, a linear map."""

    def __init__(self, v=0.5, rho_max=10.0):
        self.v, self.rho_max, self.eps = v, rho_max, 0.0

    def flux(self, rho):
        return self.v * np.asarray(rho, dtype=float)

    def flux_derivative(self, rho):
        return np.full_like(np.asarray(rho, dtype=float), self.v)


def direct_kalman(A, x0, P0, q_var, r_var, obs_cells, z):
    """Textbook KF with covariance update ``(I - K H) P``."""
    n = len(x0)
    H = np.eye(n)[obs_cells]
    x, P = x0.copy(), P0.copy()
    out = []
    for k in range(z.shape[1]):
        if k > 0:
            x = A @ x
            P = A @ P @ A.T + q_var * np.eye(n)
        S_ = H @ P @ H.T + r_var * np.eye(len(obs_cells))
        K = P @ H.T @ np.linalg.inv(S_)
        x = x + K @ (z[:, k] - H @ x)
        P = (np.eye(n) - K @ H) @ P
        out.append(x.copy())
    return np.array(out).T


def test_linear_model_matches_direct_kalman_filter():
    grid = make_grid(1.0, 0.5, 12, 10)
    fd = LinearFlux()
    stepper = S.LWRStepper(fd, grid.dx)
    n_sub = stepper.substeps_for(grid.dt)
    c = fd.v * (grid.dt / n_sub) / grid.dx
    A_sub = (1 - c) * np.eye(grid.nx) + c * np.roll(np.eye(grid.nx), 1, axis=0)
    A = np.linalg.matrix_power(A_sub, n_sub)
    rng = np.random.default_rng(0)
    cells = np.array([0, 5, 9])
    # states far from 0 and rho_max so the clamp in the Godunov flux never engages
    z = rng.uniform(4.8, 5.2, (3, grid.nt))
    pts = np.array([[grid.x[i], grid.t[n]] for i in range(3) for n in range(grid.nt)])
    pts[:, 0] = np.repeat(grid.x[cells], grid.nt)
    obs = ObservationSet(pts, z.ravel())
    x0 = rng.uniform(4.8, 5.2, grid.nx)
    cfg = E.EKFConfig(q_p=0.03, r_o=0.05, P0=0.2, jacobian_fd_step=1e-2)
    res = E.ekf_run("lwr3", fd, obs, grid, cfg, initial_state=x0)
    ref = direct_kalman(A, x0, 0.2 * np.eye(grid.nx), 0.03**2, 0.05**2, cells, z)
    assert ref.min() > 0 and ref.max() < fd.rho_max
    assert np.max(np.abs(res.rho.values - ref)) <= 1e-10


def test_fully_observed_low_noise_tracks_observations():
    grid = make_grid(1.0, 0.5, 16, 12)
    truth = S.solve_lwr(grid, S.bell_density, P.ThreeParamFD())
    obs = sample_loop_detectors(truth, m=1)
    pts = grid.points()
    obs = ObservationSet(pts, truth.values.ravel())
    cfg = E.EKFConfig(q_p=1e-3, r_o=1e-9)
    res = E.ekf_run("lwr3", P.ThreeParamFD(), obs, grid, cfg)
    assert np.max(np.abs(res.rho.values - truth.values)) <= 1e-8


def small_lwr_case(nx=48, nt=120):
    grid = make_grid(1.0, 3.0, nx, nt)
    return grid, S.solve_lwr(grid, S.bell_density, P.ThreeParamFD())


def test_filter_beats_open_loop_with_two_detectors():
    grid, truth = small_lwr_case()
    obs = sample_loop_detectors(truth, m=2, noise_std=0.01, seed=1)
    fd = P.ThreeParamFD()
    res = E.ekf_run("lwr3", fd, obs, grid)
    ol, _ = E.open_loop("lwr3", fd, grid, E.default_initial_state("lwr3", obs, grid))
    assert M.rel_error(res.rho, truth) < M.rel_error(ol, truth)


@pytest.mark.parametrize("seed", [0, 3])
def test_covariance_trace_non_increasing_in_detector_count(seed):
    grid, truth = small_lwr_case(40, 60)
    # same prior for every layout: a flat state at the (known) mean density
    x0 = np.full(grid.nx, truth.values[:, 0].mean())
    finals = []
    for m in (2, 4, 8):
        obs = sample_loop_detectors(truth, m=m, noise_std=0.01, seed=seed)
        finals.append(E.ekf_run("lwr3", P.ThreeParamFD(), obs, grid, initial_state=x0).cov_trace[-1] / grid.nx)
    assert finals[0] >= finals[1] >= finals[2]


def test_relabeling_simultaneous_observations():
    grid, truth = small_lwr_case(24, 30)
    obs = sample_loop_detectors(truth, m=4, noise_std=0.01, seed=0)
    perm = np.random.default_rng(5).permutation(obs.count)
    shuffled = ObservationSet(obs.points[perm], obs.rho[perm])
    a = E.ekf_run("lwr3", P.ThreeParamFD(), obs, grid)
    b = E.ekf_run("lwr3", P.ThreeParamFD(), shuffled, grid)
    assert np.array_equal(a.rho.values, b.rho.values)


def test_covariance_stays_symmetric_psd():
    grid, truth = small_lwr_case(20, 20)
    obs = sample_loop_detectors(truth, m=3, noise_std=0.01)
    x = E.default_initial_state("lwr3", obs, grid)
    P_ = 0.1 * np.eye(grid.nx)
    idx = np.array([0, 10, 19])
    x, P_ = E.kalman_update(x, P_, idx, obs.rho[:3], 1e-4)
    assert np.array_equal(P_, P_.T)
    assert np.min(np.linalg.eigvalsh(P_)) >= -1e-14


def test_arz_filter_runs_with_speed_rows():
    grid = make_grid(1.0, 0.5, 20, 20)
    par = P.GreenshieldsARZParams()
    rho, u = S.solve_arz(grid, S.bell_density, lambda x: np.full_like(x, 0.5), par)
    obs = sample_loop_detectors(rho, u, m=3, noise_std=0.01)
    res = E.ekf_run("arz", par, obs, grid, E.EKFConfig(observe_speed=True))
    assert res.u is not None and np.all(np.isfinite(res.u.values))
    assert M.rel_error(res.rho, rho) < 0.5


def test_config_and_model_validation():
    with pytest.raises(ValueError):
        E.EKFConfig(q_p=0)
    grid, truth = small_lwr_case(10, 10)
    obs = sample_loop_detectors(truth, m=2)
    with pytest.raises(ValueError):
        E.ekf_run("burgers", P.ThreeParamFD(), obs, grid)
    with pytest.raises(ValueError):
        E.ekf_run("lwr3", P.ThreeParamFD(), obs, grid, initial_state=np.zeros(3))


def test_divergence_reports_step():
    grid, truth = small_lwr_case(10, 10)
    obs = sample_loop_detectors(truth, m=2)
    with pytest.raises(E.EKFDivergenceError) as info:
        E.ekf_run("lwr3", P.ThreeParamFD(), obs, grid, E.EKFConfig(q_p=1e200))
    assert info.value.step == 1
