"""Finite-volume ground truth: Godunov (demand/supply) LWR and HLL + relaxation ARZ."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .domain import Field, Grid
from .physics import GreenshieldsARZParams

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class SolverConfigError(ValueError):
    """The requested output step cannot be reached within the substep budget."""


@dataclass(frozen=True)
class SolverConfig:
    cfl_safety: float = 0.9
    max_substeps: int = 10_000
    critical_density_tolerance: float = 1e-12
    rho_floor: float = 1e-8

    def __post_init__(self):
        if not 0 < self.cfl_safety <= 1:
            raise ValueError("cfl_safety must lie in (0, 1]")
        if self.max_substeps < 1:
            raise ValueError("max_substeps must be positive")


@dataclass
class SolverStats:
    """Counters filled in by the solvers."""

    clamped: int = 0
    vacuum: int = 0
    substeps: int = 0


def bell_density(x) -> np.ndarray:
    """``0.1 + 0.8 exp(-25 (x - 0.5)^2)``, the bell-shaped initial density."""
    x = np.asarray(x, dtype=float)
    return 0.1 + 0.8 * np.exp(-25.0 * (x - 0.5) ** 2)


def _flux(fd, rho):
    return np.asarray(fd.flux(rho), dtype=float)


def critical_density(fd, tol: float = 1e-12) -> float:
    """Argmax of the flux on ``[0, rho_max]`` by golden-section search."""
    lo, hi = 0.0, float(fd.rho_max)
    q = lambda r: float(_flux(fd, r))  # noqa: E731
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd_ = q(c), q(d)
    while b - a > tol:
        if fc >= fd_:
            b, d, fd_ = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = q(c)
        else:
            a, c, fc = c, d, fd_
            d = a + _GOLDEN * (b - a)
            fd_ = q(d)
    best = 0.5 * (a + b)
    # monotone fluxes peak at an end of the interval
    candidates = [(q(best), best), (q(lo), lo), (q(hi), hi)]
    return max(candidates, key=lambda c: c[0])[1]


def godunov_flux(rho_left, rho_right, fd, rho_cr: float | None = None, stats: SolverStats | None = None):
    """Demand/supply interface flux ``min(D(rho_left), S(rho_right))``.

    Inputs outside ``[0, rho_max]`` are clamped and counted in ``stats``.
    """
    rho_max = float(fd.rho_max)
    rl = np.asarray(rho_left, dtype=float)
    rr = np.asarray(rho_right, dtype=float)
    bad = int(np.count_nonzero((rl < 0) | (rl > rho_max))) + int(np.count_nonzero((rr < 0) | (rr > rho_max)))
    if bad:
        if stats is not None:
            stats.clamped += bad
        rl = np.clip(rl, 0.0, rho_max)
        rr = np.clip(rr, 0.0, rho_max)
    if rho_cr is None:
        rho_cr = critical_density(fd)
    demand = _flux(fd, np.minimum(rl, rho_cr))
    supply = _flux(fd, np.maximum(rr, rho_cr))
    return np.minimum(demand, supply)


def max_wave_speed(fd, samples: int = 2001) -> float:
    """Upper bound of ``|Q'|`` on ``[0, rho_max]`` from a dense sample."""
    rho = np.linspace(0.0, float(fd.rho_max), samples)
    return float(np.max(np.abs(np.asarray(fd.flux_derivative(rho), dtype=float))))


class LWRStepper:
    """Explicit Godunov + central diffusion step on cell averages.

    Works on arrays of shape ``(..., nx)`` so a batch of states (e.g. the
    perturbed copies of a finite-difference Jacobian) advances in one call.
    """

    def __init__(self, fd, dx: float, periodic: bool = True, config: SolverConfig | None = None,
                 stats: SolverStats | None = None):
        self.fd = fd
        self.dx = float(dx)
        self.periodic = periodic
        self.config = config or SolverConfig()
        self.stats = stats
        self.eps = float(fd.eps)
        self.rho_cr = critical_density(fd, self.config.critical_density_tolerance)
        self.speed = max_wave_speed(fd)

    def max_dt(self) -> float:
        # advective and diffusive rates add for the explicit update to stay monotone
        rate = self.speed / self.dx + 2.0 * self.eps / self.dx**2
        return math.inf if rate == 0 else self.config.cfl_safety / rate

    def substeps_for(self, dt: float) -> int:
        n = max(1, math.ceil(dt / self.max_dt() - 1e-12))
        if n > self.config.max_substeps:
            raise SolverConfigError(
                f"output step {dt:g} needs {n} substeps; CFL bound dt <= {self.config.cfl_safety:g} / "
                f"(max|Q'|/dx + 2 eps/dx^2) = {self.max_dt():g} exceeds max_substeps={self.config.max_substeps}"
            )
        return n

    def interface_fluxes(self, rho: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Total (convective + diffusive) flux through the left and right face of every cell."""
        if self.periodic:
            right = np.roll(rho, -1, axis=-1)
            f_right = godunov_flux(rho, right, self.fd, self.rho_cr, self.stats)
            if self.eps:
                f_right = f_right - self.eps * (right - rho) / self.dx
            return np.roll(f_right, 1, axis=-1), f_right
        padded = np.concatenate([rho[..., :1], rho, rho[..., -1:]], axis=-1)
        left_state, right_state = padded[..., :-1], padded[..., 1:]
        faces = godunov_flux(left_state, right_state, self.fd, self.rho_cr, self.stats)
        if self.eps:
            faces = faces - self.eps * (right_state - left_state) / self.dx
        return faces[..., :-1], faces[..., 1:]

    def substep(self, rho: np.ndarray, dt: float) -> np.ndarray:
        f_left, f_right = self.interface_fluxes(rho)
        if self.stats is not None:
            self.stats.substeps += 1
        return rho - (dt / self.dx) * (f_right - f_left)

    def advance(self, rho: np.ndarray, dt: float, n_sub: int | None = None) -> np.ndarray:
        n_sub = self.substeps_for(dt) if n_sub is None else n_sub
        h = dt / n_sub
        for _ in range(n_sub):
            rho = self.substep(rho, h)
        return rho


def solve_lwr(grid: Grid, initial_density_fn, fd, periodic: bool = True, config: SolverConfig | None = None,
              stats: SolverStats | None = None) -> Field:
    """Density field of ``rho_t + Q(rho)_x = eps rho_xx`` sampled on ``grid``."""
    stepper = LWRStepper(fd, grid.dx, periodic, config, stats)
    n_sub = stepper.substeps_for(grid.dt)
    out = np.empty(grid.shape)
    rho = np.asarray(initial_density_fn(grid.x), dtype=float).copy()
    out[:, 0] = rho
    for n in range(1, grid.nt):
        rho = stepper.advance(rho, grid.dt, n_sub)
        out[:, n] = rho
    return Field(grid, out)


class ARZStepper:
    """HLL finite-volume step for ``(rho, y = rho (u + h(rho)))`` followed by an implicit relaxation.

    States are ``(..., nx)`` arrays of density and speed.
    """

    def __init__(self, params: GreenshieldsARZParams, dx: float, periodic: bool = True,
                 config: SolverConfig | None = None, stats: SolverStats | None = None):
        self.params = params
        self.dx = float(dx)
        self.periodic = periodic
        self.config = config or SolverConfig()
        self.stats = stats
        self.k = float(params.u_max) / float(params.rho_max)

    def _floor(self, rho):
        low = rho < self.config.rho_floor
        if np.any(low):
            if self.stats is not None:
                self.stats.vacuum += int(np.count_nonzero(low))
            rho = np.where(low, self.config.rho_floor, rho)
        return rho

    def max_speed(self, rho, u) -> float:
        lam1 = u - self.k * rho
        return float(max(np.max(np.abs(lam1)), np.max(np.abs(u))))

    def substeps_for(self, dt: float, rho, u) -> int:
        speed = self.max_speed(rho, u)
        max_dt = math.inf if speed == 0 else self.config.cfl_safety * self.dx / speed
        n = max(1, math.ceil(dt / max_dt - 1e-12))
        if n > self.config.max_substeps:
            raise SolverConfigError(
                f"output step {dt:g} needs {n} substeps; CFL bound dt <= {self.config.cfl_safety:g} dx / "
                f"max|lambda| = {max_dt:g} exceeds max_substeps={self.config.max_substeps}"
            )
        return n

    def _hll(self, rho_l, y_l, rho_r, y_r):
        k = self.k
        u_l = y_l / rho_l - k * rho_l
        u_r = y_r / rho_r - k * rho_r
        s_l = np.minimum(u_l - k * rho_l, u_r - k * rho_r)
        s_r = np.maximum(u_l, u_r)
        f_l = (rho_l * u_l, y_l * u_l)
        f_r = (rho_r * u_r, y_r * u_r)
        width = np.where(s_r > s_l, s_r - s_l, 1.0)
        out = []
        for fl, fr, ql, qr in ((f_l[0], f_r[0], rho_l, rho_r), (f_l[1], f_r[1], y_l, y_r)):
            mid = (s_r * fl - s_l * fr + s_l * s_r * (qr - ql)) / width
            out.append(np.where(s_l >= 0, fl, np.where(s_r <= 0, fr, mid)))
        return out

    def substep(self, rho, u, dt):
        rho = self._floor(rho)
        y = rho * (u + self.k * rho)
        if self.periodic:
            rho_r, y_r = np.roll(rho, -1, axis=-1), np.roll(y, -1, axis=-1)
            fr_rho, fr_y = self._hll(rho, y, rho_r, y_r)
            fl_rho, fl_y = np.roll(fr_rho, 1, axis=-1), np.roll(fr_y, 1, axis=-1)
        else:
            pr = np.concatenate([rho[..., :1], rho, rho[..., -1:]], axis=-1)
            py = np.concatenate([y[..., :1], y, y[..., -1:]], axis=-1)
            f_rho, f_y = self._hll(pr[..., :-1], py[..., :-1], pr[..., 1:], py[..., 1:])
            fl_rho, fr_rho = f_rho[..., :-1], f_rho[..., 1:]
            fl_y, fr_y = f_y[..., :-1], f_y[..., 1:]
        lam = dt / self.dx
        rho_new = rho - lam * (fr_rho - fl_rho)
        y_new = y - lam * (fr_y - fl_y)
        rho_new = self._floor(rho_new)
        u_star = y_new / rho_new - self.k * rho_new
        # relaxation toward U_eq, backward Euler in u (rho is untouched by the source)
        ratio = dt / float(self.params.tau)
        u_eq = np.asarray(self.params.u_eq(rho_new), dtype=float)
        u_new = (u_star + ratio * u_eq) / (1.0 + ratio)
        if self.stats is not None:
            self.stats.substeps += 1
        return rho_new, u_new

    def advance(self, rho, u, dt, n_sub: int | None = None):
        n_sub = self.substeps_for(dt, rho, u) if n_sub is None else n_sub
        h = dt / n_sub
        for _ in range(n_sub):
            rho, u = self.substep(rho, u, h)
        return rho, u


def solve_arz(grid: Grid, initial_rho_fn, initial_u_fn, params: GreenshieldsARZParams, periodic: bool = True,
              config: SolverConfig | None = None, stats: SolverStats | None = None) -> tuple[Field, Field]:
    stepper = ARZStepper(params, grid.dx, periodic, config, stats)
    rho = np.asarray(initial_rho_fn(grid.x), dtype=float).copy()
    u = np.asarray(initial_u_fn(grid.x), dtype=float).copy()
    if u.ndim == 0:
        u = np.full_like(rho, float(u))
    out_rho = np.empty(grid.shape)
    out_u = np.empty(grid.shape)
    out_rho[:, 0], out_u[:, 0] = rho, u
    for n in range(1, grid.nt):
        rho, u = stepper.advance(rho, u, grid.dt)
        out_rho[:, n], out_u[:, n] = rho, u
    return Field(grid, out_rho), Field(grid, out_u)


def coarsen(values: np.ndarray, factor: int = 2) -> np.ndarray:
    """Average groups of ``factor`` neighbouring cells along the space axis."""
    nx = values.shape[0]
    if nx % factor:
        raise ValueError("cell count not divisible by factor")
    return values.reshape(nx // factor, factor, *values.shape[1:]).mean(axis=1)
