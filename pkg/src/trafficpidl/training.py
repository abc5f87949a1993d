"""Deterministic PIDL: composite loss, two-phase Adam -> L-BFGS training, NN baseline."""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .domain import BoundaryCollocationSet, CollocationSet, ObservationSet
from .neural import MLPParams
from .optim import AdamState, adam_step, lbfgs_minimize
from .physics import (
    pack_params,
    params_as_floats,
    residual_arz,
    residual_lwr3,
    residual_lwr_fdl,
    unpack_params,
)

RESIDUAL_KINDS = ("lwr3", "arz", "lwr_fdl", "none")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, report: "TrainReport | None" = None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 100.0
    beta: float = 100.0
    gamma: float = 100.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")

    def scaled(self, c: float) -> "LossWeights":
        return LossWeights(self.alpha * c, self.beta * c, self.gamma * c)


@dataclass(frozen=True)
class TrainConfig:
    adam_iterations: int = 1000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lbfgs_memory: int = 10
    lbfgs_tolerance: float = 1e-16
    lbfgs_max_iterations: int = 5000
    seed: int = 0
    identify_physics: bool = False
    trainable: tuple | None = None

    def __post_init__(self):
        if self.adam_iterations < 0 or self.lbfgs_max_iterations < 0 or self.lbfgs_memory < 1:
            raise ValueError("iteration counts must be non-negative and memory positive")
        if self.lbfgs_tolerance < 0:
            raise ValueError("lbfgs_tolerance must be >= 0")


@dataclass
class TrainReport:
    adam: dict
    lbfgs: dict
    net: MLPParams
    surrogate: MLPParams | None
    lambda_star: dict
    lambda_rel_error: dict
    status: str
    wall_clock: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {
            "losses": {"adam": self.adam, "lbfgs": self.lbfgs},
            "lambda_star": self.lambda_star,
            "re_table": self.lambda_rel_error,
            "status": self.status,
        }
        if include_timing:
            out["wall_clock"] = self.wall_clock
        return out

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), sort_keys=True)


def _empty_trace() -> dict:
    return {"total": [], "L_o": [], "L_c": [], "L_b": []}


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------


def _mean_sq(a):
    return ad.amean(ad.square(a))


def data_loss(net: MLPParams, obs: ObservationSet):
    if obs is None or obs.count == 0:
        return 0.0
    pred = net.forward(obs.points) if net.n_in == 2 else None
    if pred is None:
        raise ValueError("deterministic data loss expects a network with inputs (x, t)")
    err = ad.sub(ad.getitem(pred, (slice(None), 0)), obs.rho)
    total = _mean_sq(err)
    if net.n_out > 1 and obs.u is not None:
        total = ad.add(total, _mean_sq(ad.sub(ad.getitem(pred, (slice(None), 1)), obs.u)))
    return total


def residual_loss(net: MLPParams, physics, colloc: CollocationSet, kind: str, surrogate: MLPParams | None = None):
    if colloc is None or colloc.count == 0 or kind == "none":
        return 0.0
    if kind == "lwr3":
        res = residual_lwr3(net, physics, colloc.points)
    elif kind == "arz":
        res = residual_arz(net, None, physics, colloc.points)
    elif kind == "lwr_fdl":
        if surrogate is None:
            raise ValueError("lwr_fdl residual needs a surrogate network")
        res = residual_lwr_fdl(net, surrogate, colloc.points)
    else:
        raise ValueError(f"unknown residual kind {kind!r}")
    total = _mean_sq(res.r_rho)
    if res.r_u is not None:
        total = ad.add(total, _mean_sq(res.r_u))
    return total


def boundary_loss(net: MLPParams, bc: BoundaryCollocationSet):
    if bc is None or bc.count == 0:
        return 0.0
    diff = ad.sub(net.forward(bc.left()), net.forward(bc.right()))
    return ad.mul(ad.asum(ad.square(diff)), 1.0 / bc.count)


def loss_deterministic(net: MLPParams, physics, obs: ObservationSet, colloc: CollocationSet,
                       bc: BoundaryCollocationSet, weights: LossWeights, residual_kind: str = "lwr3",
                       surrogate: MLPParams | None = None):
    """``(total, L_o, L_c, L_b)`` with ``total = alpha L_o + beta L_c + gamma L_b``.

    Terms with zero weight or an empty point set are skipped and reported as 0.
    """
    l_o = data_loss(net, obs) if weights.alpha else 0.0
    l_c = residual_loss(net, physics, colloc, residual_kind, surrogate) if weights.beta else 0.0
    l_b = boundary_loss(net, bc) if weights.gamma else 0.0
    total = ad.add(ad.add(ad.mul(weights.alpha, l_o), ad.mul(weights.beta, l_c)), ad.mul(weights.gamma, l_b))
    return total, l_o, l_c, l_b


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


class PIDLObjective:
    """Loss of ``(theta, surrogate, lambda)`` packed in one flat vector."""

    def __init__(self, net: MLPParams, physics, obs, colloc, bc, weights: LossWeights, residual_kind: str,
                 trainable: tuple = (), surrogate: MLPParams | None = None):
        if residual_kind not in RESIDUAL_KINDS:
            raise ValueError(f"unknown residual kind {residual_kind!r}")
        self.net = net
        self.physics = physics
        self.obs, self.colloc, self.bc = obs, colloc, bc
        self.weights = weights
        self.kind = residual_kind
        self.trainable = tuple(trainable)
        self.surrogate = surrogate
        self.n_net = net.n_params
        self.n_sur = surrogate.n_params if surrogate is not None else 0
        self.last = (0.0, 0.0, 0.0, 0.0)

    def pack(self) -> np.ndarray:
        parts = [np.asarray(self.net.flat, dtype=float)]
        if self.surrogate is not None:
            parts.append(np.asarray(self.surrogate.flat, dtype=float))
        if self.trainable:
            parts.append(pack_params(self.physics, self.trainable))
        return np.concatenate(parts)

    def unpack(self, p):
        a, b = self.n_net, self.n_net + self.n_sur
        net = self.net.bind(ad.getitem(p, slice(0, a)))
        sur = self.surrogate.bind(ad.getitem(p, slice(a, b))) if self.surrogate is not None else None
        phys = self.physics
        if self.trainable:
            phys = unpack_params(self.physics, self.trainable, ad.getitem(p, slice(b, None)))
        return net, sur, phys

    def feasible(self, p: np.ndarray) -> bool:
        """Whether the physics coordinates of ``p`` give valid parameters."""
        if not self.trainable:
            return True
        try:
            unpack_params(self.physics, self.trainable, np.asarray(p[self.n_net + self.n_sur:], dtype=float))
        except ValueError:
            return False
        return True

    def terms(self, p):
        net, sur, phys = self.unpack(p)
        return loss_deterministic(net, phys, self.obs, self.colloc, self.bc, self.weights, self.kind, sur)

    def __call__(self, p):
        return self.terms(p)[0]

    def value_and_grad(self, p: np.ndarray) -> tuple[float, np.ndarray]:
        tape = ad.Tape()
        var = tape.variable(p)
        total, l_o, l_c, l_b = self.terms(var)
        self.last = tuple(float(np.asarray(ad.value_of(v))) for v in (total, l_o, l_c, l_b))
        if not isinstance(total, ad.Var):
            return self.last[0], np.zeros_like(p)
        return self.last[0], tape.gradient(total, var)

    def finalize(self, p: np.ndarray):
        net, sur, phys = self.unpack(np.asarray(p, dtype=float))
        return net, sur, phys


def _record(trace: dict, terms) -> None:
    for key, v in zip(("total", "L_o", "L_c", "L_b"), terms):
        trace[key].append(float(v))


def _rel_errors(found: dict, truth) -> dict:
    if truth is None:
        return {}
    true = params_as_floats(truth)
    return {k: abs(found[k] - true[k]) / abs(true[k]) for k in found if k in true and true[k] != 0}


def run_two_phase(objective: PIDLObjective, config: TrainConfig, truth=None) -> TrainReport:
    """Adam pre-training for ``adam_iterations`` then L-BFGS until the loss change stalls."""
    start = time.perf_counter()
    p = objective.pack()
    adam_trace, lbfgs_trace = _empty_trace(), _empty_trace()
    state = AdamState.zeros(p.size)
    for _ in range(config.adam_iterations):
        try:
            f, g = objective.value_and_grad(p)
        except ad.NumericOverflowError as exc:
            raise TrainingDiverged(f"overflow during Adam: {exc}",
                                   _partial(objective, p, adam_trace, lbfgs_trace)) from exc
        _record(adam_trace, objective.last)
        if not (np.isfinite(f) and np.all(np.isfinite(g))):
            raise TrainingDiverged("non-finite loss during Adam", _partial(objective, p, adam_trace, lbfgs_trace))
        p_next, state = adam_step(p, g, state, config.lr, config.beta1, config.beta2, config.adam_eps)
        if not objective.feasible(p_next):
            # report the last valid iterate
            raise TrainingDiverged("Adam left the valid physics parameter range",
                                   _partial(objective, p, adam_trace, lbfgs_trace))
        p = p_next

    status = "adam-only"
    if config.lbfgs_max_iterations > 0:

        def fun(z):
            if not objective.feasible(z):
                # e.g. sigma < 0: a barrier, so the line search backtracks
                return np.inf, np.zeros_like(z)
            try:
                f, g = objective.value_and_grad(z)
            except ad.NumericOverflowError:
                # the line search treats this as an overshoot and shrinks the step
                return np.inf, np.zeros_like(z)
            if not np.isfinite(f):
                return np.inf, g
            return f, g

        def on_step(k, x, f):
            _record(lbfgs_trace, objective.last)

        result = lbfgs_minimize(fun, p, config.lbfgs_memory, config.lbfgs_tolerance,
                                config.lbfgs_max_iterations, callback=on_step)
        if not np.isfinite(result.f):
            raise TrainingDiverged("non-finite loss during L-BFGS", _partial(objective, p, adam_trace, lbfgs_trace))
        p = result.x
        status = result.status
    net, sur, phys = objective.finalize(p)
    found = params_as_floats(phys) if phys is not None else {}
    return TrainReport(
        adam_trace, lbfgs_trace, net, sur,
        found if objective.trainable else {},
        _rel_errors(found, truth) if objective.trainable else {},
        status, time.perf_counter() - start,
    )


def _partial(objective, p, adam_trace, lbfgs_trace) -> TrainReport:
    net, sur, phys = objective.finalize(p)
    return TrainReport(adam_trace, lbfgs_trace, net, sur, {}, {}, "diverged")


def train_pidl(net0: MLPParams, lambda0, obs: ObservationSet, colloc: CollocationSet, bc: BoundaryCollocationSet,
               weights: LossWeights, config: TrainConfig, residual_kind: str = "lwr3",
               surrogate0: MLPParams | None = None, truth=None) -> TrainReport:
    """Train the density network (and, with ``identify_physics``, the physics parameters).

    ``config.trainable`` names the physics fields to learn; it defaults to all
    fields except the ARZ relaxation time.
    """
    trainable: tuple = ()
    if config.identify_physics and lambda0 is not None:
        if config.trainable is not None:
            trainable = tuple(config.trainable)
        else:
            trainable = tuple(n for n in params_as_floats(lambda0) if n != "tau")
    objective = PIDLObjective(net0, lambda0, obs, colloc, bc, weights, residual_kind, trainable, surrogate0)
    return run_two_phase(objective, config, truth)


def train_nn_baseline(net0: MLPParams, obs: ObservationSet, config: TrainConfig,
                      alpha: float = 100.0) -> TrainReport:
    """Pure data fit: the PIDL trainer with the physics and boundary weights at zero."""
    return train_pidl(net0, None, obs, CollocationSet(), BoundaryCollocationSet(np.zeros(0)),
                      LossWeights(alpha, 0.0, 0.0), config, residual_kind="none")


def adam_fit(loss_builder, x0, iterations: int = 1000, lr: float = 1e-3) -> np.ndarray:
    """Plain Adam loop on ``loss_builder``."""
    p = np.array(x0, dtype=float)
    state = AdamState.zeros(p.size)
    for _ in range(iterations):
        _, g = ad.value_and_grad(loss_builder, p)
        p, state = adam_step(p, g, state, lr)
    return p


@dataclass
class GridSearchResult:
    best: LossWeights
    scores: dict = field(default_factory=dict)
    report: TrainReport | None = None


def grid_search(net0: MLPParams, lambda0, obs, colloc, bc, config: TrainConfig, validation_points: np.ndarray,
                validation_values: np.ndarray, residual_kind: str = "lwr3", alpha: float = 100.0,
                candidates=(1, 10, 50, 100, 150, 200), surrogate0=None) -> GridSearchResult:
    """Fix ``alpha`` and pick ``(beta, gamma)`` by relative error on held-out points."""
    from .metrics import rel_error_arrays

    scores = {}
    best, best_score, best_report = None, np.inf, None
    for beta, gamma in itertools.product(candidates, candidates):
        w = LossWeights(alpha, float(beta), float(gamma))
        try:
            report = train_pidl(net0, lambda0, obs, colloc, bc, w, config, residual_kind, surrogate0)
        except TrainingDiverged:
            scores[(beta, gamma)] = np.inf
            continue
        pred = report.net.forward(validation_points)[:, 0]
        score = rel_error_arrays(pred, validation_values)
        scores[(beta, gamma)] = score
        if score < best_score:
            best, best_score, best_report = w, score, report
    if best is None:
        raise TrainingDiverged("every grid-search candidate diverged")
    return GridSearchResult(best, scores, best_report)
