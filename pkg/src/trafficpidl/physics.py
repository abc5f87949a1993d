"""Fundamental diagrams, flux functions and PDE residuals of the traffic models.

Parameter fields may hold plain floats or tape variables; every formula is
written with the primitives of :mod:`trafficpidl.autodiff` so the same code
serves the solvers (floats) and system identification (variables).
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .neural import MLPParams


def _positive(name: str, value, strict: bool = True):
    if isinstance(value, ad.Var):
        return
    v = float(value)
    if not np.isfinite(v) or (v <= 0 if strict else v < 0):
        raise ValueError(f"{name} must be {'>' if strict else '>='} 0, got {v}")


@dataclass(frozen=True)
class ThreeParamFD:
    """Three-parameter flux ``Q = sigma (a + (b - a) rho/rho_max - sqrt(1 + y^2))``.

    ``a = sqrt(1 + (delta p)^2)``, ``b = sqrt(1 + (delta (1 - p))^2)`` and
    ``y = delta (rho/rho_max - p)``.  ``eps`` is the diffusion coefficient of
    the viscous LWR equation.
    """

    delta: float = 5.0
    p: float = 0.2
    sigma: float = 0.1
    rho_max: float = 1.0
    eps: float = 0.005

    def __post_init__(self):
        _positive("delta", self.delta)
        _positive("sigma", self.sigma)
        _positive("rho_max", self.rho_max)
        _positive("eps", self.eps, strict=False)

    def _ab(self):
        a = ad.sqrt(ad.add(1.0, ad.square(ad.mul(self.delta, self.p))))
        b = ad.sqrt(ad.add(1.0, ad.square(ad.mul(self.delta, ad.sub(1.0, self.p)))))
        return a, b

    def flux(self, rho):
        a, b = self._ab()
        r = ad.div(rho, self.rho_max)
        y = ad.mul(self.delta, ad.sub(r, self.p))
        inner = ad.sub(ad.add(a, ad.mul(ad.sub(b, a), r)), ad.sqrt(ad.add(1.0, ad.square(y))))
        return ad.mul(self.sigma, inner)

    def flux_derivative(self, rho):
        a, b = self._ab()
        y = ad.mul(self.delta, ad.sub(ad.div(rho, self.rho_max), self.p))
        slope = ad.sub(ad.sub(b, a), ad.div(ad.mul(self.delta, y), ad.sqrt(ad.add(1.0, ad.square(y)))))
        return ad.mul(ad.div(self.sigma, self.rho_max), slope)

    def speed(self, rho):
        return ad.div(self.flux(rho), rho)


@dataclass(frozen=True)
class GreenshieldsFD:
    """Greenshields LWR flux ``Q = u_max rho (1 - rho/rho_max)``."""

    u_max: float = 1.02
    rho_max: float = 1.13
    eps: float = 0.0

    def __post_init__(self):
        _positive("u_max", self.u_max)
        _positive("rho_max", self.rho_max)
        _positive("eps", self.eps, strict=False)

    def speed(self, rho):
        return speed_greenshields(rho, self)

    def flux(self, rho):
        return ad.mul(rho, self.speed(rho))

    def flux_derivative(self, rho):
        return ad.mul(self.u_max, ad.sub(1.0, ad.mul(2.0, ad.div(rho, self.rho_max))))


@dataclass(frozen=True)
class LinearFlux:
    """``Q = v rho``; pure advection, handy as a linear reference model."""

    v: float = 0.5
    rho_max: float = 1.0
    eps: float = 0.0

    def flux(self, rho):
        return ad.mul(self.v, rho)

    def flux_derivative(self, rho):
        return ad.add(ad.mul(0.0, rho), self.v)


@dataclass(frozen=True)
class GreenshieldsARZParams:
    """ARZ with Greenshields equilibrium speed and hesitation ``h = U_eq(0) - U_eq(rho)``."""

    rho_max: float = 1.13
    u_max: float = 1.02
    tau: float = 0.02

    def __post_init__(self):
        _positive("rho_max", self.rho_max)
        _positive("u_max", self.u_max)
        _positive("tau", self.tau)

    def u_eq(self, rho):
        return speed_greenshields(rho, self)

    def hesitation(self, rho):
        return ad.mul(self.u_max, ad.div(rho, self.rho_max))

    def hesitation_derivative(self):
        return ad.div(self.u_max, self.rho_max)


def speed_greenshields(rho, params):
    return ad.mul(params.u_max, ad.sub(1.0, ad.div(rho, params.rho_max)))


def flux_three_param(rho, fd: ThreeParamFD):
    return fd.flux(rho)


# --------------------------------------------------------------------------
# trainable parameter packing
# --------------------------------------------------------------------------

# parameters kept positive by optimizing their logarithm
_LOG_FIELDS = {"eps", "tau"}


def param_names(params) -> tuple:
    return tuple(f.name for f in fields(params))


def pack_params(params, trainable: Sequence[str]) -> np.ndarray:
    """Raw optimizer coordinates of the trainable fields (log-space where needed)."""
    raw = []
    for name in trainable:
        v = float(getattr(params, name))
        if name in _LOG_FIELDS:
            if v <= 0:
                raise ValueError(f"{name} must be positive to be trained in log space")
            v = float(np.log(v))
        raw.append(v)
    return np.asarray(raw, dtype=float)


def unpack_params(template, trainable: Sequence[str], raw):
    """Inverse of :func:`pack_params`; ``raw`` may be a tape variable."""
    if len(trainable) == 0:
        return template
    updates = {}
    for k, name in enumerate(trainable):
        v = ad.getitem(raw, k)
        updates[name] = ad.exp(v) if name in _LOG_FIELDS else v
    return replace(template, **updates)


def params_as_floats(params) -> dict:
    return {name: float(ad.value_of(getattr(params, name))) for name in param_names(params)}


# --------------------------------------------------------------------------
# residuals
# --------------------------------------------------------------------------


@dataclass
class ResidualValue:
    r_rho: object
    r_u: object = None


def _as_points(points) -> np.ndarray:
    if hasattr(points, "x") and hasattr(points, "t"):
        return np.array([[points.x, points.t]], dtype=float)
    arr = np.asarray(points, dtype=float)
    return arr.reshape(1, -1) if arr.ndim == 1 else arr


def _flat(a):
    return None if a is None else ad.reshape(a, (-1,))


def _needs_second(eps) -> bool:
    return isinstance(eps, ad.Var) or float(eps) != 0.0


def residual_lwr3(net: MLPParams, fd, points) -> ResidualValue:
    """``r = rho_t + Q'(rho) rho_x - eps rho_xx`` at each point.

    ``points`` has the network's input layout: ``(x, t)`` or ``(x, t, z...)``.
    """
    X = _as_points(points)
    second = _needs_second(fd.eps)
    jet = net.jet(X, d1=("x", "t"), d2=("x",) if second else ()).column(0)
    rho, rho_x, rho_t = _flat(jet.value), _flat(jet.d1["x"]), _flat(jet.d1["t"])
    r = ad.add(rho_t, ad.mul(fd.flux_derivative(rho), rho_x))
    if second and jet.d2["x"] is not None:
        r = ad.sub(r, ad.mul(fd.eps, _flat(jet.d2["x"])))
    return ResidualValue(r)


def residual_arz(net_rho: MLPParams, net_u: MLPParams | None, params: GreenshieldsARZParams, points) -> ResidualValue:
    """Conservation and momentum residuals of Greenshields ARZ.

    With ``net_u=None`` the first network must output ``(rho, u)``.
    """
    X = _as_points(points)
    if net_u is None:
        jet = net_rho.jet(X, d1=("x", "t"))
        jr, ju = jet.column(0), jet.column(1)
    else:
        jr = net_rho.jet(X, d1=("x", "t")).column(0)
        ju = net_u.jet(X, d1=("x", "t")).column(0)
    return arz_residual_from_jets(jr, ju, params)


def arz_residual_from_jets(jr, ju, params: GreenshieldsARZParams) -> ResidualValue:
    rho, rho_x, rho_t = _flat(jr.value), _flat(jr.d1["x"]), _flat(jr.d1["t"])
    u, u_x, u_t = _flat(ju.value), _flat(ju.d1["x"]), _flat(ju.d1["t"])
    hp = params.hesitation_derivative()
    r_rho = ad.add(rho_t, ad.add(ad.mul(rho_x, u), ad.mul(rho, u_x)))
    w_t = ad.add(u_t, ad.mul(hp, rho_t))
    w_x = ad.add(u_x, ad.mul(hp, rho_x))
    relax = ad.div(ad.sub(params.u_eq(rho), u), params.tau)
    r_u = ad.sub(ad.add(w_t, ad.mul(u, w_x)), relax)
    return ResidualValue(r_rho, r_u)


def residual_lwr_fdl(net: MLPParams, surrogate: MLPParams, points) -> ResidualValue:
    """``r = rho_t + q'(rho) rho_x`` with ``q`` a learned scalar map."""
    X = _as_points(points)
    jet = net.jet(X, d1=("x", "t")).column(0)
    return lwr_fdl_residual_from_jet(jet, surrogate)


def lwr_fdl_residual_from_jet(jet, surrogate: MLPParams) -> ResidualValue:
    rho, rho_x, rho_t = _flat(jet.value), _flat(jet.d1["x"]), _flat(jet.d1["t"])
    name = surrogate.input_names[0]
    qjet = surrogate.jet(ad.reshape(rho, (-1, 1)), d1=(name,))
    dq = qjet.d1[name]
    if dq is None:
        return ResidualValue(rho_t)
    return ResidualValue(ad.add(rho_t, ad.mul(_flat(dq), rho_x)))


def fit_surrogate_to_flux(fd, surrogate: MLPParams, n_points: int = 200, iterations: int = 3000,
                          lr: float = 5e-3) -> MLPParams:
    """Least-squares fit of a surrogate to a parametric flux on ``[0, rho_max]``."""
    from .training import adam_fit  # local import: training depends on this module

    rho = np.linspace(0.0, float(fd.rho_max), n_points).reshape(-1, 1)
    target = np.asarray(fd.flux(rho), dtype=float)

    def loss(p):
        pred = surrogate.bind(p).forward(rho)
        return ad.amean(ad.square(ad.sub(pred, target)))

    flat = adam_fit(loss, surrogate.flat, iterations=iterations, lr=lr)
    return surrogate.bind(flat)
