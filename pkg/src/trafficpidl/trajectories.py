"""Vehicle trajectory data: CSV ingestion, Edie aggregation, synthesis from solver fields, probe sampling."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .domain import Field, Grid, ObservationSet

COLUMNS = ("vehicle_id", "time", "position", "speed", "lane")


class TrajectoryParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class TrajectoryDataset:
    """Trajectory records as parallel arrays, in file order.

    ``segment_length`` (metres) bounds the positions when given.
    """

    vehicle_id: np.ndarray
    time: np.ndarray
    position: np.ndarray
    speed: np.ndarray
    lane: np.ndarray
    site: str = ""
    segment_length: float | None = None

    def __post_init__(self):
        arrays = {
            "vehicle_id": np.asarray(self.vehicle_id, dtype=np.int64).reshape(-1),
            "time": np.asarray(self.time, dtype=float).reshape(-1),
            "position": np.asarray(self.position, dtype=float).reshape(-1),
            "speed": np.asarray(self.speed, dtype=float).reshape(-1),
            "lane": np.asarray(self.lane, dtype=np.int64).reshape(-1),
        }
        n = len(arrays["time"])
        if any(len(a) != n for a in arrays.values()):
            raise ValueError("record columns differ in length")
        for k, a in arrays.items():
            object.__setattr__(self, k, a)
        if self.segment_length is not None and n:
            if self.position.min() < 0 or self.position.max() > self.segment_length:
                raise ValueError("positions must lie within the segment")
        for vid in np.unique(self.vehicle_id):
            if np.any(np.diff(self.time[self.vehicle_id == vid]) < 0):
                raise ValueError(f"times of vehicle {vid} decrease")

    def __len__(self) -> int:
        return len(self.time)

    @property
    def n_vehicles(self) -> int:
        return len(np.unique(self.vehicle_id))

    def vehicles(self):
        """``(id, row indices)`` per vehicle, ids ascending, rows in file order."""
        for vid in np.unique(self.vehicle_id):
            yield int(vid), np.flatnonzero(self.vehicle_id == vid)

    def total_distance(self) -> float:
        return float(sum(np.sum(np.abs(np.diff(self.position[rows]))) for _, rows in self.vehicles()))


def _load_column_map(column_map) -> tuple[dict, dict]:
    """``{"columns": {canonical: source}, "scale": {canonical: factor}}`` from a dict or JSON file."""
    if column_map is None:
        return {}, {}
    if not isinstance(column_map, dict):
        with open(column_map) as fh:
            column_map = json.load(fh)
    unknown = set(column_map) - {"columns", "scale"}
    if unknown:
        raise ValueError(f"unknown column-map keys {sorted(unknown)}")
    cols = dict(column_map.get("columns", {}))
    scale = dict(column_map.get("scale", {}))
    for k in list(cols) + list(scale):
        if k not in COLUMNS:
            raise ValueError(f"unknown canonical column {k!r}")
    return cols, scale


def load_trajectories_csv(path, column_map=None, segment_length: float | None = None,
                          site: str = "") -> TrajectoryDataset:
    """Read ``vehicle_id,time,position,speed,lane`` records.

    Args:
        path: CSV file with a header row.
        column_map: Optional mapping (dict or JSON path) from canonical names
            to the file's column names plus per-column scale factors, e.g. to
            convert feet to metres.
        segment_length: Road length for position validation.
        site: Free-text site label stored in the dataset.

    Raises:
        TrajectoryParseError: On a missing column or malformed value; the
            message carries the 1-based line number.
    """
    cols, scale = _load_column_map(column_map)
    source = {c: cols.get(c, c) for c in COLUMNS}
    data = {c: [] for c in COLUMNS}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise TrajectoryParseError(1, "missing header")
        header = [h.strip() for h in header]
        try:
            index = {c: header.index(source[c]) for c in COLUMNS}
        except ValueError:
            missing = [source[c] for c in COLUMNS if source[c] not in header]
            raise TrajectoryParseError(1, f"header lacks columns {missing}") from None
        for line, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise TrajectoryParseError(line, f"expected {len(header)} fields, got {len(row)}")
            try:
                data["vehicle_id"].append(int(row[index["vehicle_id"]]))
                data["lane"].append(int(row[index["lane"]]))
                for c in ("time", "position", "speed"):
                    v = float(row[index[c]]) * float(scale.get(c, 1.0))
                    if not math.isfinite(v):
                        raise ValueError(f"non-finite {c}")
                    data[c].append(v)
            except ValueError as exc:
                raise TrajectoryParseError(line, str(exc)) from None
    try:
        return TrajectoryDataset(*(data[c] for c in COLUMNS), site=site, segment_length=segment_length)
    except ValueError as exc:
        raise TrajectoryParseError(0, str(exc)) from None


def write_trajectories_csv(ds: TrajectoryDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for k in range(len(ds)):
            w.writerow([int(ds.vehicle_id[k]), repr(float(ds.time[k])), repr(float(ds.position[k])),
                        repr(float(ds.speed[k])), int(ds.lane[k])])


# --------------------------------------------------------------------------
# Edie aggregation
# --------------------------------------------------------------------------


@dataclass
class EdieResult:
    density: Field
    speed: Field
    flow: Field
    t0: float = 0.0
    time_in_cell: np.ndarray = field(default=None, repr=False)
    distance_in_cell: np.ndarray = field(default=None, repr=False)


def _split_segment(ta, xa, tb, xb, dx, dt, t0):
    """Pieces ``(cell_i, step_n, duration, distance)`` of one straight trajectory piece."""
    cuts = [ta, tb]
    k0, k1 = math.floor((ta - t0) / dt), math.floor((tb - t0) / dt)
    cuts += [t0 + k * dt for k in range(k0 + 1, k1 + 1)]
    if xb != xa:
        v = (xb - xa) / (tb - ta)
        j0, j1 = sorted((math.floor(xa / dx), math.floor(xb / dx)))
        cuts += [ta + (j * dx - xa) / v for j in range(j0 + 1, j1 + 1)]
    cuts = sorted(c for c in set(cuts) if ta <= c <= tb)
    for c0, c1 in zip(cuts[:-1], cuts[1:]):
        if c1 <= c0:
            continue
        s0, s1 = (c0 - ta) / (tb - ta), (c1 - ta) / (tb - ta)
        p0, p1 = xa + s0 * (xb - xa), xa + s1 * (xb - xa)
        mid_t, mid_x = 0.5 * (c0 + c1), 0.5 * (p0 + p1)
        yield math.floor(mid_x / dx), math.floor((mid_t - t0) / dt), c1 - c0, abs(p1 - p0)


def aggregate_edie(ds: TrajectoryDataset, cell_dx: float = 20.0, cell_dt: float = 5.0, L: float | None = None,
                   T: float | None = None, t0: float | None = None, per_lane: bool = False) -> EdieResult:
    """Edie's generalized density, flow and speed on a space-time cell lattice.

    Trajectories are linear between consecutive records of a vehicle and are
    split exactly at cell boundaries.  Density is total time spent in a cell
    over its area, flow the total distance over the area, speed their ratio.
    All lanes are pooled; ``per_lane`` divides density and flow by the lane
    count.  Cells without any vehicle time are masked as missing.  Field node
    ``(i, n)`` stands for the cell ``[i dx, (i+1) dx) x [t0 + n dt, t0 + (n+1) dt)``.
    """
    if not (cell_dx > 0 and cell_dt > 0):
        raise ValueError("cell sizes must be positive")
    t0 = float(ds.time.min()) if t0 is None and len(ds) else float(t0 or 0.0)
    L = L if L is not None else (ds.segment_length or (float(ds.position.max()) if len(ds) else cell_dx))
    T = T if T is not None else ((float(ds.time.max()) - t0) if len(ds) else cell_dt)
    nx = max(2, math.ceil(L / cell_dx - 1e-12))
    nt = max(2, math.ceil(T / cell_dt - 1e-12))
    grid = Grid(float(nx * cell_dx), float(nt * cell_dt), nx, nt)
    tt = np.zeros((nx, nt))
    dd = np.zeros((nx, nt))
    for _, rows in ds.vehicles():
        t, x = ds.time[rows], ds.position[rows]
        for a in range(len(rows) - 1):
            if t[a + 1] <= t[a]:
                continue
            for i, n, dur, dist in _split_segment(t[a], x[a], t[a + 1], x[a + 1], cell_dx, cell_dt, t0):
                if 0 <= i < nx and 0 <= n < nt:
                    tt[i, n] += dur
                    dd[i, n] += dist
    area = cell_dx * cell_dt
    lanes = max(1, len(np.unique(ds.lane))) if per_lane else 1
    density = tt / area / lanes
    flow = dd / area / lanes
    valid = tt > 0
    speed = np.where(valid, dd / np.where(valid, tt, 1.0), 0.0)
    return EdieResult(Field(grid, density, valid), Field(grid, speed, valid), Field(grid, flow, valid), t0, tt, dd)


# --------------------------------------------------------------------------
# synthetic trajectories and probes
# --------------------------------------------------------------------------


def _interp_periodic(values: np.ndarray, x: np.ndarray, dx: float) -> np.ndarray:
    nx = len(values)
    s = x / dx - 0.5
    i0 = np.floor(s).astype(int)
    w = s - i0
    return (1 - w) * values[i0 % nx] + w * values[(i0 + 1) % nx]


def synthesize_trajectories(rho: Field, u: Field, n_vehicles: int, length_scale: float = 1.0,
                            time_scale: float = 1.0, record_every: int = 1, lane: int = 1) -> TrajectoryDataset:
    """Vehicles advected by a solver speed field on a ring road.

    Initial positions follow the initial density (quantiles of its cumulative
    mass).  Positions advance with forward Euler on the field's time step.  A
    vehicle leaving at ``x = L`` ends its record there (at the interpolated
    crossing time) and re-enters at ``x = 0`` under a new id, so every record
    lies inside the segment.  Outputs are scaled to metres and seconds.
    """
    grid = rho.grid
    mass = np.concatenate([[0.0], np.cumsum(rho.values[:, 0] * grid.dx)])
    edges = np.arange(grid.nx + 1) * grid.dx
    q = (np.arange(n_vehicles) + 0.5) / n_vehicles * mass[-1]
    x = np.interp(q, mass, edges)
    ids = np.arange(n_vehicles)
    next_id = n_vehicles
    recs = {k: [] for k in COLUMNS}

    def emit(vid, t, pos, spd):
        recs["vehicle_id"].append(int(vid))
        recs["time"].append(t * time_scale)
        recs["position"].append(pos * length_scale)
        recs["speed"].append(spd * length_scale / time_scale)
        recs["lane"].append(lane)

    L = grid.L
    for n in range(grid.nt):
        t = grid.t[n]
        v = _interp_periodic(u.values[:, n], x, grid.dx)
        if n % record_every == 0 or n == grid.nt - 1:
            for k in range(n_vehicles):
                emit(ids[k], t, x[k], v[k])
        if n == grid.nt - 1:
            break
        x_new = x + grid.dt * v
        for k in np.flatnonzero(x_new >= L):
            frac = (L - x[k]) / (x_new[k] - x[k])
            t_cross = t + frac * grid.dt
            emit(ids[k], t_cross, L, v[k])
            ids[k] = next_id
            next_id += 1
            emit(ids[k], t_cross, 0.0, v[k])
            x_new[k] -= L
        x = x_new
    order = np.lexsort((np.arange(len(recs["time"])), np.asarray(recs["vehicle_id"])))
    cols = {k: np.asarray(vals)[order] for k, vals in recs.items()}
    return TrajectoryDataset(*(cols[c] for c in COLUMNS), site="synthetic", segment_length=L * length_scale)


def select_probe_vehicles(ds: TrajectoryDataset, ratio: float, seed: int = 0) -> np.ndarray:
    """Ids kept by an independent Bernoulli(``ratio``) draw per vehicle (ids ascending)."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    ids = np.unique(ds.vehicle_id)
    keep = np.random.default_rng(seed).random(len(ids)) < ratio
    return ids[keep]


def probe_observations(ds: TrajectoryDataset, ratio: float, density: Field, seed: int = 0,
                       t0: float = 0.0) -> ObservationSet:
    """Records of sampled probe vehicles as labeled points.

    Speed comes from the records; density is read from ``density`` in the
    cell containing each record.
    """
    ids = select_probe_vehicles(ds, ratio, seed)
    rows = np.flatnonzero(np.isin(ds.vehicle_id, ids))
    grid = density.grid
    pts = np.column_stack([ds.position[rows], ds.time[rows] - t0])
    i = grid.cell_of(pts[:, 0])
    n = np.clip(np.floor(pts[:, 1] / grid.dt), 0, grid.nt - 1).astype(int)
    return ObservationSet(pts, density.values[i, n], ds.speed[rows])
