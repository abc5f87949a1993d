"""Space-time grids, fields on them, and the labeled/unlabeled point sets used for training."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Grid:
    """Uniform lattice on ``[0, L] x [0, T]``.

    Space samples sit at cell centers ``(i + 1/2) dx``; time samples at
    ``n dt`` for ``n = 0 .. nt - 1``.
    """

    L: float
    T: float
    nx: int
    nt: int

    def __post_init__(self):
        if not (self.L > 0 and self.T > 0):
            raise ValueError(f"grid extent must be positive, got L={self.L}, T={self.T}")
        if int(self.nx) != self.nx or int(self.nt) != self.nt or self.nx < 2 or self.nt < 2:
            raise ValueError(f"grid needs nx >= 2 and nt >= 2, got nx={self.nx}, nt={self.nt}")

    @property
    def dx(self) -> float:
        return self.L / self.nx

    @property
    def dt(self) -> float:
        return self.T / self.nt

    @property
    def x(self) -> np.ndarray:
        return (np.arange(self.nx) + 0.5) * self.dx

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.nt) * self.dt

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.nt)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """``(X, T)`` arrays of shape ``(nx, nt)``."""
        return np.meshgrid(self.x, self.t, indexing="ij")

    def points(self) -> np.ndarray:
        """All nodes as ``(nx * nt, 2)``, x outer / t inner."""
        X, Tm = self.mesh()
        return np.column_stack([X.ravel(), Tm.ravel()])

    def cell_of(self, x) -> np.ndarray:
        """Index of the cell whose center is nearest to ``x``."""
        return np.clip(np.floor(np.asarray(x, dtype=float) / self.dx), 0, self.nx - 1).astype(int)

    def step_of(self, t) -> np.ndarray:
        return np.clip(np.rint(np.asarray(t, dtype=float) / self.dt), 0, self.nt - 1).astype(int)


def make_grid(L: float, T: float, nx: int, nt: int) -> Grid:
    return Grid(float(L), float(T), int(nx), int(nt))


@dataclass(frozen=True)
class Field:
    """Scalar values on a grid, shape ``(nx, nt)``.

    ``mask`` marks valid cells (``None`` means all valid); invalid cells hold 0.
    """

    grid: Grid
    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise ValueError(f"field shape {values.shape} does not match grid {self.grid.shape}")
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != values.shape:
                raise ValueError("mask shape does not match values")
            values = np.where(mask, values, 0.0)
            object.__setattr__(self, "mask", mask)
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def check_density(self, rho_bound: float) -> None:
        if np.any(self.values < 0) or np.any(self.values > rho_bound):
            raise ValueError(f"density outside [0, {rho_bound}]")

    def map(self, fn) -> "Field":
        return Field(self.grid, fn(self.values), self.mask)


@dataclass(frozen=True)
class DomainPoint:
    x: float
    t: float


@dataclass(frozen=True)
class ObservationSet:
    """Labeled points: positions/times with observed density and optionally speed."""

    points: np.ndarray
    rho: np.ndarray
    u: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        rho = np.asarray(self.rho, dtype=float).reshape(-1)
        if len(rho) != len(pts):
            raise ValueError("rho and points differ in length")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "rho", rho)
        if self.u is not None:
            u = np.asarray(self.u, dtype=float).reshape(-1)
            if len(u) != len(pts):
                raise ValueError("u and points differ in length")
            object.__setattr__(self, "u", u)
        for arr in (pts, rho, self.u):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ValueError("observation values must be finite")

    @property
    def count(self) -> int:
        return len(self.rho)

    def __len__(self) -> int:
        return self.count

    @classmethod
    def empty(cls, with_u: bool = False) -> "ObservationSet":
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros(0) if with_u else None)

    def concat(self, other: "ObservationSet") -> "ObservationSet":
        if (self.u is None) != (other.u is None):
            raise ValueError("cannot merge sets with and without speed")
        u = None if self.u is None else np.concatenate([self.u, other.u])
        return ObservationSet(np.vstack([self.points, other.points]), np.concatenate([self.rho, other.rho]), u)


@dataclass(frozen=True)
class CollocationSet:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float).reshape(-1, 2))

    @property
    def count(self) -> int:
        return len(self.points)

    def __len__(self) -> int:
        return self.count


@dataclass(frozen=True)
class BoundaryCollocationSet:
    """Times ``t_b``; each induces the pair ``(0, t_b)``, ``(L, t_b)``."""

    times: np.ndarray
    L: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float).reshape(-1))

    @property
    def count(self) -> int:
        return len(self.times)

    def __len__(self) -> int:
        return self.count

    def left(self) -> np.ndarray:
        return np.column_stack([np.zeros(self.count), self.times])

    def right(self) -> np.ndarray:
        return np.column_stack([np.full(self.count, self.L), self.times])


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


def detector_positions(L: float, m: int) -> np.ndarray:
    """Evenly spaced detector positions including both road ends; a single detector sits mid-road."""
    if m < 1:
        raise ValueError(f"need at least one detector, got m={m}")
    if m == 1:
        return np.array([L / 2.0])
    return np.arange(m) * (L / (m - 1))


def sample_loop_detectors(field_rho: Field, field_u: Field | None = None, m: int = 3,
                          noise_std: float = 0.0, seed: int = 0) -> ObservationSet:
    """Stationary sensors streaming every time step at ``m`` evenly spaced cells.

    Gaussian noise with standard deviation ``noise_std`` is added; noisy
    densities are clipped at 0.
    """
    grid = field_rho.grid
    if field_u is not None and field_u.grid != grid:
        raise ValueError("density and speed fields must share a grid")
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    cells = grid.cell_of(detector_positions(grid.L, m))
    xs = grid.x[cells]
    ii = np.repeat(cells, grid.nt)
    nn = np.tile(np.arange(grid.nt), len(cells))
    points = np.column_stack([np.repeat(xs, grid.nt), grid.t[nn]])
    rho = field_rho.values[ii, nn].copy()
    u = None if field_u is None else field_u.values[ii, nn].copy()
    rng = np.random.default_rng(seed)
    if noise_std > 0:
        rho = np.clip(rho + rng.normal(0.0, noise_std, size=rho.shape), 0.0, None)
        if u is not None:
            u = u + rng.normal(0.0, noise_std, size=u.shape)
    return ObservationSet(points, rho, u)


def sample_collocation(grid: Grid, n_c: int, strategy: str = "uniform-random", seed: int = 0) -> CollocationSet:
    if n_c < 0:
        raise ValueError("n_c must be non-negative")
    rng = np.random.default_rng(seed)
    if strategy == "uniform-random":
        pts = rng.uniform(0.0, 1.0, size=(n_c, 2)) * np.array([grid.L, grid.T])
        return CollocationSet(pts)
    if strategy == "grid-subsample":
        total = grid.nx * grid.nt
        if n_c > total:
            raise ValueError(f"cannot pick {n_c} distinct nodes from a grid of {total}")
        idx = rng.choice(total, size=n_c, replace=False)
        return CollocationSet(grid.points()[idx])
    raise ValueError(f"unknown collocation strategy {strategy!r}")


def collocation_count(grid: Grid, rate: float) -> int:
    """Number of collocation points for a collocation rate (points per grid node)."""
    return int(round(rate * grid.nx * grid.nt))


def sample_boundary(grid: Grid, n_b: int, seed: int = 0, even: bool = False) -> BoundaryCollocationSet:
    """Boundary collocation times, i.i.d. uniform or evenly spaced (``k T / n_b``; one sample at ``T/2``)."""
    if n_b < 0:
        raise ValueError("n_b must be non-negative")
    if even:
        times = np.array([grid.T / 2.0]) if n_b == 1 else np.arange(n_b) * (grid.T / max(n_b, 1))
    else:
        times = np.random.default_rng(seed).uniform(0.0, grid.T, size=n_b)
    return BoundaryCollocationSet(times, grid.L)


def initial_condition_observations(field_rho: Field, field_u: Field | None = None) -> ObservationSet:
    """The ``t = 0`` column as labeled points (optional extra data term)."""
    grid = field_rho.grid
    pts = np.column_stack([grid.x, np.zeros(grid.nx)])
    u = None if field_u is None else field_u.values[:, 0]
    return ObservationSet(pts, field_rho.values[:, 0], u)


# --------------------------------------------------------------------------
# CSV formats
# --------------------------------------------------------------------------


def write_field_csv(fld: Field, path) -> None:
    """``x,t,value`` rows, x outer / t inner; invalid cells leave ``value`` empty."""
    grid = fld.grid
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "t", "value"])
        for i, x in enumerate(grid.x):
            for n, t in enumerate(grid.t):
                ok = fld.mask is None or fld.mask[i, n]
                w.writerow([repr(float(x)), repr(float(t)), repr(float(fld.values[i, n])) if ok else ""])


def read_field_csv(path) -> Field:
    xs, ts, vals = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["x", "t", "value"]:
            raise ValueError(f"{path}: expected header x,t,value, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns")
            xs.append(float(row[0]))
            ts.append(float(row[1]))
            vals.append(float(row[2]) if row[2] != "" else np.nan)
    ux, ut = np.unique(xs), np.unique(ts)
    nx, nt = len(ux), len(ut)
    if nx * nt != len(vals):
        raise ValueError(f"{path}: rows do not form a full grid")
    dx = ux[0] * 2.0
    dt = ut[1] - ut[0]
    grid = Grid(dx * nx, dt * nt, nx, nt)
    values = np.asarray(vals).reshape(nx, nt)
    mask = np.isfinite(values)
    return Field(grid, np.nan_to_num(values), None if mask.all() else mask)


def write_observations_csv(obs: ObservationSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "t", "rho"] + (["u"] if obs.u is not None else []))
        for k in range(obs.count):
            row = [repr(float(obs.points[k, 0])), repr(float(obs.points[k, 1])), repr(float(obs.rho[k]))]
            if obs.u is not None:
                row.append(repr(float(obs.u[k])))
            w.writerow(row)


def read_observations_csv(path) -> ObservationSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header not in (["x", "t", "rho"], ["x", "t", "rho", "u"]):
            raise ValueError(f"{path}: expected header x,t,rho[,u], got {header}")
        rows = [[float(v) for v in row] for row in reader]
    arr = np.asarray(rows, dtype=float).reshape(-1, len(header))
    return ObservationSet(arr[:, :2], arr[:, 2], arr[:, 3] if len(header) == 4 else None)


def write_points_csv(points: np.ndarray, path, header=("x", "t")) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(header))
        for row in np.asarray(points, dtype=float).reshape(len(points), -1):
            w.writerow([repr(float(v)) for v in row])


def read_points_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    return np.asarray(rows, dtype=float).reshape(-1, len(header))
