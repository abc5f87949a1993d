"""Extended Kalman filter on the discretized traffic models.

The state is the vector of cell densities (LWR) or stacked densities and
speeds (ARZ).  One output step of the finite-volume solver is the transition
map; its Jacobian comes from forward differences, evaluated as one batched
solver call.  Loop detectors observe the cell they sit in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import Field, Grid, ObservationSet
from .solvers import ARZStepper, LWRStepper, SolverConfig


class EKFDivergenceError(FloatingPointError):
    def __init__(self, step: int, what: str = "covariance"):
        super().__init__(f"EKF {what} became non-finite at time step {step}")
        self.step = step


@dataclass(frozen=True)
class EKFConfig:
    """Filter noise levels.

    The defaults are tuning choices, not calibrated values.

    Args:
        q_p: Process noise standard deviation per cell and step.
        r_o: Observation noise standard deviation.
        P0: Initial covariance is ``P0 * I``.
        jacobian_fd_step: Forward-difference step for the transition Jacobian.
        observe_speed: Add speed rows for ARZ when observations carry ``u``.
    """

    q_p: float = 1e-3
    r_o: float = 1e-2
    P0: float = 0.1
    jacobian_fd_step: float = 1e-6
    observe_speed: bool = False

    def __post_init__(self):
        for name in ("q_p", "r_o", "P0", "jacobian_fd_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")


@dataclass
class EKFResult:
    rho: Field
    u: Field | None
    cov_trace: np.ndarray


class _Model:
    """Transition map on flat state vectors, batched over leading axes."""

    def __init__(self, kind: str, params, grid: Grid, periodic: bool, solver_config: SolverConfig | None):
        self.kind = kind
        self.nx = grid.nx
        self.dt = grid.dt
        if kind == "lwr3":
            self.stepper = LWRStepper(params, grid.dx, periodic, solver_config)
            self.n_sub = self.stepper.substeps_for(grid.dt)
            self.dim = grid.nx
        elif kind == "arz":
            self.stepper = ARZStepper(params, grid.dx, periodic, solver_config)
            self.dim = 2 * grid.nx
        else:
            raise ValueError(f"unknown EKF model {kind!r}")

    def step(self, states: np.ndarray, n_sub: int | None = None) -> np.ndarray:
        if self.kind == "lwr3":
            return self.stepper.advance(states, self.dt, self.n_sub)
        rho, u = states[..., : self.nx], states[..., self.nx :]
        rho, u = self.stepper.advance(rho, u, self.dt, n_sub)
        return np.concatenate([rho, u], axis=-1)

    def substeps(self, state: np.ndarray) -> int | None:
        if self.kind == "lwr3":
            return self.n_sub
        # a margin keeps the perturbed copies within the CFL bound of the base state
        return self.stepper.substeps_for(self.dt, state[: self.nx], state[self.nx :]) + 1

    def step_and_jacobian(self, x: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
        n_sub = self.substeps(x)
        batch = np.vstack([x, x + h * np.eye(self.dim)])
        out = self.step(batch, n_sub)
        fx = out[0]
        return fx, ((out[1:] - fx) / h).T


def _observations_by_step(obs: ObservationSet, grid: Grid, with_speed: bool, nx: int):
    """Map time step -> (state indices, values), density rows first."""
    steps = grid.step_of(obs.points[:, 1])
    cells = grid.cell_of(obs.points[:, 0])
    table: dict[int, tuple[list, list]] = {}
    for k in range(obs.count):
        idx, vals = table.setdefault(int(steps[k]), ([], []))
        idx.append(int(cells[k]))
        vals.append(float(obs.rho[k]))
        if with_speed:
            idx.append(nx + int(cells[k]))
            vals.append(float(obs.u[k]))
    out = {}
    for n, (i, v) in table.items():
        i, v = np.asarray(i), np.asarray(v)
        # canonical row order makes the update independent of how observations are listed
        order = np.lexsort((v, i))
        out[n] = (i[order], v[order])
    return out


def default_initial_state(kind: str, obs: ObservationSet, grid: Grid) -> np.ndarray:
    """Uniform state at the mean of the earliest observed step."""
    if obs.count == 0:
        raise ValueError("no observations to initialize from")
    steps = grid.step_of(obs.points[:, 1])
    first = steps == steps.min()
    rho0 = np.full(grid.nx, float(np.mean(obs.rho[first])))
    if kind == "lwr3":
        return rho0
    u_mean = float(np.mean(obs.u[first])) if obs.u is not None else 0.0
    return np.concatenate([rho0, np.full(grid.nx, u_mean)])


def kalman_update(x, P, idx, z, r_var):
    """Joseph-form measurement update for rows ``idx`` of the identity."""
    S = P[np.ix_(idx, idx)] + r_var * np.eye(len(idx))
    PHt = P[:, idx]
    K = np.linalg.solve(S, PHt.T).T
    x = x + K @ (z - x[idx])
    A = -K @ np.eye(len(x))[idx]
    A[np.diag_indices_from(A)] += 1.0
    P = A @ P @ A.T + r_var * (K @ K.T)
    return x, 0.5 * (P + P.T)


def ekf_run(model: str, params, observations: ObservationSet, grid: Grid, config: EKFConfig | None = None,
            initial_state: np.ndarray | None = None, periodic: bool = True,
            solver_config: SolverConfig | None = None) -> EKFResult:
    """Filter ``observations`` through the solver of ``model`` ("lwr3" or "arz").

    Observations are binned to the nearest output step and to the cell
    containing them.  The estimate at step 0 is the updated initial state.
    """
    config = config or EKFConfig()
    m = _Model(model, params, grid, periodic, solver_config)
    with_speed = model == "arz" and config.observe_speed and observations.u is not None
    by_step = _observations_by_step(observations, grid, with_speed, grid.nx)
    x = default_initial_state(model, observations, grid) if initial_state is None else np.array(initial_state, float)
    if x.shape != (m.dim,):
        raise ValueError(f"initial state must have length {m.dim}")
    P = config.P0 * np.eye(m.dim)
    with np.errstate(over="ignore"):
        # huge noise levels overflow to inf and surface as a divergence below
        q_var, r_var = np.square(np.float64(config.q_p)), np.square(np.float64(config.r_o))
    est = np.empty((m.dim, grid.nt))
    traces = np.empty(grid.nt)
    for n in range(grid.nt):
        with np.errstate(over="ignore", invalid="ignore"):
            if n > 0:
                x, F = m.step_and_jacobian(x, config.jacobian_fd_step)
                P = F @ P @ F.T
                P[np.diag_indices_from(P)] += q_var
            if n in by_step and np.all(np.isfinite(P)):
                idx, z = by_step[n]
                x, P = kalman_update(x, P, idx, z, r_var)
        if not (np.all(np.isfinite(P))):
            raise EKFDivergenceError(n)
        if not np.all(np.isfinite(x)):
            raise EKFDivergenceError(n, "state")
        est[:, n] = x
        traces[n] = np.trace(P)
    rho = Field(grid, est[: grid.nx])
    u = Field(grid, est[grid.nx :]) if model == "arz" else None
    return EKFResult(rho, u, traces)


def open_loop(model: str, params, grid: Grid, initial_state: np.ndarray, periodic: bool = True,
              solver_config: SolverConfig | None = None) -> tuple[Field, Field | None]:
    """The model run forward from ``initial_state`` without any measurement update."""
    m = _Model(model, params, grid, periodic, solver_config)
    x = np.array(initial_state, dtype=float)
    est = np.empty((m.dim, grid.nt))
    est[:, 0] = x
    for n in range(1, grid.nt):
        x = m.step(x, m.substeps(x))
        est[:, n] = x
    return Field(grid, est[: grid.nx]), (Field(grid, est[grid.nx :]) if model == "arz" else None)
