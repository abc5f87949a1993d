"""Evaluation metrics: relative error, squared error, MSE and histogram KL divergence."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .domain import Field


class UndefinedMetricError(ValueError):
    pass


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    """Values of two fields (or arrays) restricted to cells valid in both."""
    if isinstance(pred, Field) or isinstance(truth, Field):
        if not (isinstance(pred, Field) and isinstance(truth, Field)):
            raise TypeError("compare a Field with a Field")
        if pred.grid != truth.grid:
            raise ValueError("fields live on different grids")
        valid = np.ones(pred.grid.shape, dtype=bool)
        for f in (pred, truth):
            if f.mask is not None:
                valid &= f.mask
        return pred.values[valid], truth.values[valid]
    p, t = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    return p.ravel(), t.ravel()


def rel_error_arrays(pred, truth) -> float:
    p, t = _pair(pred, truth)
    denom = np.sqrt(np.sum(t * t))
    if denom == 0:
        raise UndefinedMetricError("relative error undefined for an all-zero reference")
    return float(np.sqrt(np.sum((p - t) ** 2)) / denom)


def rel_error(pred, truth) -> float:
    """``||pred - truth|| / ||truth||`` over all (valid) points."""
    return rel_error_arrays(pred, truth)


def squared_error_map(pred, truth):
    """Pointwise squared error; a Field when given Fields (invalid cells masked)."""
    if isinstance(pred, Field) and isinstance(truth, Field):
        if pred.grid != truth.grid:
            raise ValueError("fields live on different grids")
        mask = None
        if pred.mask is not None or truth.mask is not None:
            mask = np.ones(pred.grid.shape, dtype=bool)
            for f in (pred, truth):
                if f.mask is not None:
                    mask &= f.mask
        return Field(pred.grid, (pred.values - truth.values) ** 2, mask)
    p, t = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    return (p - t) ** 2


def mse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    if p.size == 0:
        raise UndefinedMetricError("no valid points")
    return float(np.mean((p - t) ** 2))


def kl_from_distributions(p, q) -> float:
    """``sum P ln(P/Q)`` for discrete distributions; zero-mass bins of P contribute 0."""
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("distributions differ in length")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("probabilities must be non-negative")
    p, q = p / p.sum(), q / q.sum()
    nz = p > 0
    if np.any(q[nz] == 0):
        return float("inf")
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def histogram_pair(samples_p, samples_q, n_bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Add-one smoothed histograms of two sample sets on the support of their union."""
    a = np.asarray(samples_p, dtype=float).ravel()
    b = np.asarray(samples_q, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both sample sets must be non-empty")
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, n_bins + 1)
    ca = np.histogram(a, bins=edges)[0] + 1.0
    cb = np.histogram(b, bins=edges)[0] + 1.0
    return ca / ca.sum(), cb / cb.sum()


def kl_divergence(samples_p, samples_q, n_bins: int = 20) -> float:
    """Histogram estimate of ``KL(P || Q)`` from samples."""
    return kl_from_distributions(*histogram_pair(samples_p, samples_q, n_bins))


@dataclass
class MetricReport:
    re_rho: float
    mse_rho: float
    kl_rho: float | None = None
    re_u: float | None = None
    mse_u: float | None = None
    kl_u: float | None = None
    se_rho: np.ndarray | None = field(default=None, repr=False)
    se_u: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v is None or k.startswith("se_"):
                continue
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{k} must be finite and >= 0, got {v}")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if not k.startswith("se_")}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def field_metrics(pred_rho, truth_rho, pred_u=None, truth_u=None) -> MetricReport:
    """Deterministic comparison of predicted and reference fields."""
    se_rho = squared_error_map(pred_rho, truth_rho)
    report = MetricReport(rel_error(pred_rho, truth_rho), mse(pred_rho, truth_rho), se_rho=se_rho)
    if pred_u is not None and truth_u is not None:
        report.re_u = rel_error(pred_u, truth_u)
        report.mse_u = mse(pred_u, truth_u)
        report.se_u = squared_error_map(pred_u, truth_u)
    return report


def _kl_of(pred_samples, truth_samples, n_bins, per_point):
    pred_samples = np.asarray(pred_samples, dtype=float)
    truth_samples = np.asarray(truth_samples, dtype=float)
    if not per_point:
        return kl_divergence(pred_samples, truth_samples, n_bins)
    # samples laid out (n_points, n_draws); average the per-point divergences
    vals = [kl_divergence(p, q, n_bins) for p, q in zip(pred_samples, truth_samples)]
    return float(np.mean(vals))


def uq_metrics(samples, truth_rho, truth_u=None, truth_samples_rho=None, truth_samples_u=None,
               n_bins: int = 20, per_point: bool = False) -> MetricReport:
    """Errors of the predicted mean fields plus KL between predicted and reference samples.

    ``samples`` is a :class:`~trafficpidl.gan.UQSampleSet`.  Reference samples
    are laid out ``(nx, nt, n_draws)``; without them the KL compares the
    predicted draws with the reference field values.
    """
    n_pts = truth_rho.grid.nx * truth_rho.grid.nt

    def ref(truth, draws):
        arr = truth.values if draws is None else np.asarray(draws, dtype=float)
        return arr.reshape(n_pts, -1)

    report = field_metrics(Field(truth_rho.grid, samples.mean_rho), truth_rho)
    report.kl_rho = _kl_of(samples.rho.reshape(n_pts, -1), ref(truth_rho, truth_samples_rho), n_bins, per_point)
    if truth_u is not None and samples.u is not None:
        pred_u = Field(truth_u.grid, samples.mean_u)
        report.re_u = rel_error(pred_u, truth_u)
        report.mse_u = mse(pred_u, truth_u)
        report.se_u = squared_error_map(pred_u, truth_u)
        report.kl_u = _kl_of(samples.u.reshape(n_pts, -1), ref(truth_u, truth_samples_u), n_bins, per_point)
    return report
