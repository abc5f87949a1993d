"""Physics-informed GANs for uncertainty quantification of traffic states.

The generator maps ``(x, t, z)`` to ``(rho, u)``.  The discriminator scores
``(x, t, state[, physics feature])`` and is trained to output values near 1
on *generated* samples and near 0 on observed ones; the generator therefore
minimizes the mean discriminator score of its own samples.  Four variants
differ only in how the PDE residual enters:

* ``pi-gan``: mean squared residual added to the generator loss.
* ``pid-gan``: ``exp(-|r|^2)`` appended to every discriminator input.
* ``mean-gan``: residual averaged over sampled physics parameters, then squared.
* ``pi-gan-fdl``: LWR residual with a learned flux network trained jointly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .domain import BoundaryCollocationSet, CollocationSet, Grid, ObservationSet
from .neural import MLPParams
from .optim import AdamState, adam_step
from .physics import arz_residual_from_jets, lwr_fdl_residual_from_jet, residual_lwr3

VARIANTS = ("pi-gan", "pid-gan", "mean-gan", "pi-gan-fdl")
D_CLAMP = 1e-7


class GANDiverged(FloatingPointError):
    def __init__(self, message: str, trace: dict | None = None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class GANConfig:
    """Adversarial training setup.

    Args:
        alpha: Weight of the adversarial data term; the physics weight is ``1 - alpha``.
        gamma: Weight of the periodic boundary mismatch (off by default).
        batch_size: Observation/collocation points drawn per iteration; ``None`` uses every point.
        model: Residual used by the physics term, ``"arz"`` or ``"lwr3"``.
    """

    latent_dim: int = 1
    iterations: int = 5000
    lr_generator: float = 1e-3
    lr_discriminator: float = 1e-3
    alpha: float = 0.4
    gamma: float = 0.0
    n_mc: int = 100
    seed: int = 0
    variant: str = "pi-gan"
    batch_size: int | None = None
    model: str = "arz"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.latent_dim < 1 or self.iterations < 0 or self.n_mc < 1:
            raise ValueError("latent_dim and n_mc must be positive, iterations non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.model not in ("arz", "lwr3"):
            raise ValueError("model must be 'arz' or 'lwr3'")

    @property
    def beta(self) -> float:
        return 1.0 - self.alpha


@dataclass(frozen=True)
class StochasticPhysics:
    """Independent Gaussian ``(mean, std)`` per physics parameter, sampled ``n_k`` times."""

    base: object
    std: dict = field(default_factory=dict)
    n_k: int = 10

    def __post_init__(self):
        if self.n_k < 1:
            raise ValueError("n_k must be >= 1")
        names = {f.name for f in fields(self.base)}
        for k, s in self.std.items():
            if k not in names:
                raise ValueError(f"unknown parameter {k!r}")
            if s < 0:
                raise ValueError("std must be >= 0")

    def sample(self, rng: np.random.Generator) -> list:
        draws = []
        for _ in range(self.n_k):
            upd = {k: float(getattr(self.base, k)) + s * rng.standard_normal() for k, s in sorted(self.std.items())}
            draws.append(replace(self.base, **upd))
        return draws


@dataclass
class UQSampleSet:
    """Monte-Carlo draws of the generator on a grid, arrays shaped ``(nx, nt, n_mc)``."""

    grid: Grid
    rho: np.ndarray
    u: np.ndarray | None = None

    def __post_init__(self):
        if self.rho.shape[:2] != self.grid.shape:
            raise ValueError("sample array does not match grid")
        if self.u is not None and self.u.shape != self.rho.shape:
            raise ValueError("rho and u draws differ in shape")

    @property
    def n_mc(self) -> int:
        return self.rho.shape[2]

    @property
    def mean_rho(self) -> np.ndarray:
        return self.rho.mean(axis=2)

    @property
    def std_rho(self) -> np.ndarray:
        return self.rho.std(axis=2)

    @property
    def mean_u(self) -> np.ndarray | None:
        return None if self.u is None else self.u.mean(axis=2)

    @property
    def std_u(self) -> np.ndarray | None:
        return None if self.u is None else self.u.std(axis=2)

    def write_csv(self, path) -> None:
        """``x,t,mean_rho,std_rho,mean_u,std_u`` rows, x outer / t inner (speed columns empty without u)."""
        pts = self.grid.points()
        cols = [self.mean_rho.ravel(), self.std_rho.ravel()]
        if self.u is not None:
            cols += [self.mean_u.ravel(), self.std_u.ravel()]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "t", "mean_rho", "std_rho", "mean_u", "std_u"])
            for k, (x, t) in enumerate(pts):
                row = [repr(float(x)), repr(float(t))] + [repr(float(c[k])) for c in cols]
                if self.u is None:
                    row += ["", ""]
                w.writerow(row)


# --------------------------------------------------------------------------
# forward maps and losses
# --------------------------------------------------------------------------


def generator_forward(gen: MLPParams, points, z):
    """Generator outputs for points ``(N, 2)`` and latent draws ``(N, latent_dim)``."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    z = np.asarray(z, dtype=float).reshape(len(pts), -1)
    return gen.forward(np.hstack([pts, z]))


def discriminator_loss(disc_out_fake, disc_out_real):
    """``-mean ln D(fake) - mean ln(1 - D(real))`` with D clamped away from 0 and 1.

    Both arguments are discriminator outputs (arrays or tape variables); an
    empty batch contributes 0.
    """
    total = 0.0
    if ad.value_of(disc_out_fake).size:
        d = ad.maximum(ad.minimum(disc_out_fake, 1.0 - D_CLAMP), D_CLAMP)
        total = ad.sub(total, ad.amean(ad.log(d)))
    if ad.value_of(disc_out_real).size:
        d = ad.maximum(ad.minimum(disc_out_real, 1.0 - D_CLAMP), D_CLAMP)
        total = ad.sub(total, ad.amean(ad.log(ad.sub(1.0, d))))
    return total


def physics_feature(residual_sq):
    """``exp(-|r|^2)``: 1 where the physics holds, decaying with the residual."""
    return ad.exp(ad.neg(residual_sq))


def pi_physics_loss(residual_draws):
    """Mean of squared residuals; ``residual_draws`` is ``(n_draws, n_points)``."""
    return ad.amean(ad.square(residual_draws))


def mean_physics_loss(residual_draws):
    """Mean over points of the squared draw-averaged residual."""
    return ad.amean(ad.square(ad.amean(residual_draws, axis=0)))


def generator_loss(disc_out_fake, physics_term, weights: tuple, boundary_term=0.0):
    """``alpha mean D(fake) + beta physics_term + gamma boundary_term``."""
    alpha, beta, gamma = weights
    l_o = ad.amean(disc_out_fake) if ad.value_of(disc_out_fake).size else 0.0
    return ad.add(ad.add(ad.mul(alpha, l_o), ad.mul(beta, physics_term)), ad.mul(gamma, boundary_term))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


class _Wiring:
    """Per-variant residual computation on generator jets."""

    def __init__(self, config: GANConfig, physics, surrogate: MLPParams | None):
        self.config = config
        self.physics = physics
        self.surrogate = surrogate
        if config.variant == "mean-gan" and not isinstance(physics, StochasticPhysics):
            raise ValueError("mean-gan needs StochasticPhysics")
        if config.variant == "pi-gan-fdl" and surrogate is None:
            raise ValueError("pi-gan-fdl needs a flux surrogate network")

    def base(self):
        return self.physics.base if isinstance(self.physics, StochasticPhysics) else self.physics

    def residual_draws(self, gen: MLPParams, X, rng, sur: MLPParams | None = None):
        """Residuals as a list of ``(r_rho, r_u)`` pairs, one per physics draw."""
        variant = self.config.variant
        if variant == "pi-gan-fdl":
            jet = gen.jet(X, d1=("x", "t")).column(0)
            return [(lwr_fdl_residual_from_jet(jet, sur).r_rho, None)]
        draws = self.physics.sample(rng) if variant == "mean-gan" else [self.base()]
        if self.config.model == "arz":
            jet = gen.jet(X, d1=("x", "t"))
            jr, ju = jet.column(0), jet.column(1)
            out = []
            for p in draws:
                res = arz_residual_from_jets(jr, ju, p)
                out.append((res.r_rho, res.r_u))
            return out
        return [(residual_lwr3(gen, p, X).r_rho, None) for p in draws]


def _stack_draws(draws, k):
    items = [ad.reshape(d[k], (1, -1)) for d in draws]
    return items[0] if len(items) == 1 else ad.concatenate(items, axis=0)


def _sq_norm(pair):
    r_rho, r_u = pair
    sq = ad.square(r_rho)
    return sq if r_u is None else ad.add(sq, ad.square(r_u))


def _disc_input(points, state, extra=None):
    parts = [points, state]
    if extra is not None:
        parts.append(ad.reshape(extra, (-1, 1)))
    return ad.concatenate(parts, axis=1)


def _batch(rng, n: int, size: int | None) -> np.ndarray:
    if size is None or size >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=size, replace=False))


def train_gan(gen0: MLPParams, disc0: MLPParams, physics, obs: ObservationSet, colloc: CollocationSet,
              bc: BoundaryCollocationSet | None, config: GANConfig, surrogate0: MLPParams | None = None):
    """Alternate one generator Adam step and one discriminator Adam step per iteration.

    Returns ``(generator, discriminator, trace)``; with ``pi-gan-fdl`` the
    trained surrogate is stored in ``trace["surrogate"]``.
    """
    wiring = _Wiring(config, physics, surrogate0)
    rng = np.random.default_rng(config.seed)
    n_state = gen0.n_out
    real_state = obs.rho.reshape(-1, 1) if n_state == 1 else np.column_stack([obs.rho, obs.u])
    pid = config.variant == "pid-gan"
    weights = (config.alpha, config.beta, config.gamma)
    fdl = config.variant == "pi-gan-fdl"
    n_gen = gen0.n_params
    theta = np.asarray(gen0.flat, dtype=float).copy()
    if fdl:
        theta = np.concatenate([theta, np.asarray(surrogate0.flat, dtype=float)])
    phi = np.asarray(disc0.flat, dtype=float).copy()
    g_state, d_state = AdamState.zeros(theta.size), AdamState.zeros(phi.size)
    trace = {"generator": [], "discriminator": [], "physics": []}
    ld = config.latent_dim

    for _ in range(config.iterations):
        io = _batch(rng, obs.count, config.batch_size)
        ic = _batch(rng, colloc.count, config.batch_size)
        pts_o = obs.points[io]
        z_o = rng.standard_normal((len(io), ld))
        pts_c = colloc.points[ic]
        z_c = rng.standard_normal((len(ic), ld))
        X_o = np.hstack([pts_o, z_o])
        X_c = np.hstack([pts_c, z_c])
        z_b = rng.standard_normal((bc.count, ld)) if bc is not None and config.gamma else None

        # generator step (discriminator weights frozen)
        tape = ad.Tape()
        tv = tape.variable(theta)
        gen = gen0.bind(ad.getitem(tv, slice(0, n_gen)))
        sur = surrogate0.bind(ad.getitem(tv, slice(n_gen, None))) if fdl else None
        disc = disc0.bind(phi)
        fake = gen.forward(X_o)
        feat_fake = None
        physics_term = 0.0
        if pid:
            pair = wiring.residual_draws(gen, X_o, rng, sur)[0]
            feat_fake = physics_feature(_sq_norm(pair))
        elif config.beta and colloc.count:
            draws = wiring.residual_draws(gen, X_c, rng, sur)
            for k in (0, 1):
                if draws[0][k] is None:
                    continue
                stacked = _stack_draws(draws, k)
                term = mean_physics_loss(stacked) if config.variant == "mean-gan" else pi_physics_loss(stacked)
                physics_term = ad.add(physics_term, term)
        boundary_term = 0.0
        if z_b is not None:
            left = gen.forward(np.hstack([bc.left(), z_b]))
            right = gen.forward(np.hstack([bc.right(), z_b]))
            boundary_term = ad.mul(ad.asum(ad.square(ad.sub(left, right))), 1.0 / bc.count)
        d_fake = disc.forward(_disc_input(pts_o, fake, feat_fake))
        g_loss = generator_loss(d_fake, physics_term, weights, boundary_term)
        g_val = float(ad.value_of(g_loss))
        if not np.isfinite(g_val):
            raise GANDiverged("non-finite generator loss", trace)
        if isinstance(g_loss, ad.Var):
            theta, g_state = adam_step(theta, tape.gradient(g_loss, tv), g_state, config.lr_generator)

        # discriminator step on the updated generator's samples
        gen_now = gen0.bind(theta[:n_gen])
        fake_now = gen_now.forward(X_o)
        feat_fake_v = feat_real_v = None
        if pid:
            sur_now = surrogate0.bind(theta[n_gen:]) if fdl else None
            feat_fake_v = physics_feature(_sq_norm(wiring.residual_draws(gen_now, X_o, rng, sur_now)[0]))
            # observed states carry no derivatives; they are scored with the
            # physics feature of the generator at the same inputs
            feat_real_v = feat_fake_v
        tape = ad.Tape()
        pv = tape.variable(phi)
        disc = disc0.bind(pv)
        out_fake = disc.forward(_disc_input(pts_o, fake_now, feat_fake_v))
        out_real = disc.forward(_disc_input(pts_o, real_state[io], feat_real_v))
        d_loss = discriminator_loss(out_fake, out_real)
        d_val = float(ad.value_of(d_loss))
        if not np.isfinite(d_val):
            raise GANDiverged("non-finite discriminator loss", trace)
        if isinstance(d_loss, ad.Var):
            phi, d_state = adam_step(phi, tape.gradient(d_loss, pv), d_state, config.lr_discriminator)
        trace["generator"].append(g_val)
        trace["discriminator"].append(d_val)
        trace["physics"].append(float(ad.value_of(physics_term)))

    if fdl:
        trace["surrogate"] = surrogate0.bind(theta[n_gen:])
    return gen0.bind(theta[:n_gen]), disc0.bind(phi), trace


def predict_distribution(gen: MLPParams, grid: Grid, n_mc: int = 100, seed: int = 0,
                         chunk: int = 200_000) -> UQSampleSet:
    """``n_mc`` latent draws per grid node pushed through the generator."""
    if n_mc < 2:
        raise ValueError("n_mc must be >= 2")
    rng = np.random.default_rng(seed)
    pts = grid.points()
    ld = gen.n_in - 2
    z = rng.standard_normal((len(pts), n_mc, ld))
    X = np.concatenate([np.repeat(pts[:, None, :], n_mc, axis=1), z], axis=2).reshape(-1, gen.n_in)
    out = np.concatenate([np.asarray(gen.forward(X[k : k + chunk])) for k in range(0, len(X), chunk)])
    out = out.reshape(grid.nx, grid.nt, n_mc, gen.n_out)
    u = out[..., 1] if gen.n_out > 1 else None
    return UQSampleSet(grid, out[..., 0], u)


def add_observation_noise(obs: ObservationSet, std: float, seed: int = 0) -> ObservationSet:
    """Gaussian noise of standard deviation ``std`` on observed density and speed."""
    rng = np.random.default_rng(seed)
    rho = obs.rho + std * rng.standard_normal(obs.count)
    u = None if obs.u is None else obs.u + std * rng.standard_normal(obs.count)
    return ObservationSet(obs.points, rho, u)
