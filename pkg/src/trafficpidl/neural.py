"""Feedforward networks: the density approximator, FD surrogate, generator and discriminator."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Jet, Var

ACTIVATIONS = ("tanh", "relu", "leaky-relu", "identity")
OUTPUT_ACTIVATIONS = ("identity", "sigmoid")
_DEFAULT_NAMES = ("x", "t", "z", "q3", "q4", "q5", "q6", "q7")


@dataclass(frozen=True)
class MLPParams:
    """Weights of a fully connected network stored as one flat vector.

    Layer ``k`` occupies ``W_k`` (shape ``(n_in, n_out)``, row-major) followed
    by ``b_k``.  ``flat`` is normally an array; :meth:`bind` swaps in a tape
    variable so the same forward code produces differentiable outputs.

    Inputs are optionally mapped affinely from ``[input_lower, input_upper]``
    onto ``[-1, 1]`` before the first layer.
    """

    layer_sizes: tuple
    activation: str
    output_activation: str
    flat: np.ndarray
    input_lower: tuple | None = None
    input_upper: tuple | None = None
    input_names: tuple | None = None

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {self.layer_sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        object.__setattr__(self, "layer_sizes", sizes)
        if ad.value_of(self.flat).shape != (count_params(sizes),):
            raise ValueError("flat parameter vector has the wrong length")
        if (self.input_lower is None) != (self.input_upper is None):
            raise ValueError("input_lower and input_upper must be given together")
        if self.input_lower is not None:
            lo = tuple(float(v) for v in self.input_lower)
            hi = tuple(float(v) for v in self.input_upper)
            if len(lo) != sizes[0] or len(hi) != sizes[0] or any(h <= l for l, h in zip(lo, hi)):
                raise ValueError("input bounds must match the input width with upper > lower")
            object.__setattr__(self, "input_lower", lo)
            object.__setattr__(self, "input_upper", hi)
        names = self.input_names
        if names is None:
            names = ("x",) if sizes[0] == 1 else _DEFAULT_NAMES[: sizes[0]]
        if len(names) != sizes[0]:
            raise ValueError("input_names must match the input width")
        object.__setattr__(self, "input_names", tuple(names))

    @property
    def n_params(self) -> int:
        return count_params(self.layer_sizes)

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def bind(self, flat) -> "MLPParams":
        """Same architecture with a different parameter vector (array or Var)."""
        return replace(self, flat=flat)

    def layers(self):
        offset = 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = ad.reshape(ad.getitem(self.flat, slice(offset, offset + n_in * n_out)), (n_in, n_out))
            offset += n_in * n_out
            b = ad.getitem(self.flat, slice(offset, offset + n_out))
            offset += n_out
            yield w, b

    def _scale_inputs(self, X):
        if self.input_lower is None:
            return X
        lo = np.asarray(self.input_lower)
        hi = np.asarray(self.input_upper)
        return ad.div(ad.sub(X, 0.5 * (hi + lo)), 0.5 * (hi - lo))

    def _input_step(self, name: str) -> np.ndarray:
        if name not in self.input_names:
            raise ValueError(f"unknown input direction {name!r}; inputs are {self.input_names}")
        col = self.input_names.index(name)
        seed = np.zeros((1, self.n_in))
        seed[0, col] = 1.0
        if self.input_lower is not None:
            seed[0, col] = 1.0 / (0.5 * (self.input_upper[col] - self.input_lower[col]))
        return seed

    def forward(self, X):
        """Outputs for a batch ``(N, n_in)`` or a single input vector."""
        single = ad.value_of(X).ndim == 1
        if single:
            X = ad.reshape(X, (1, -1))
        if ad.value_of(X).shape[-1] != self.n_in:
            raise ValueError(f"expected {self.n_in} inputs, got {ad.value_of(X).shape[-1]}")
        a = self._scale_inputs(X)
        layers = list(self.layers())
        for k, (w, b) in enumerate(layers):
            z = ad.add(ad.matmul(a, w), b)
            a = _activate(z, self.output_activation if k == len(layers) - 1 else self.activation)
        return ad.reshape(a, (-1,)) if single else a

    __call__ = forward

    def jet(self, X, d1: Sequence[str] = ("x", "t"), d2: Sequence[str] = ()) -> Jet:
        """Outputs with first derivatives along ``d1`` and pure second derivatives along ``d2``."""
        if ad.value_of(X).ndim != 2 or ad.value_of(X).shape[1] != self.n_in:
            raise ValueError(f"jet expects a batch of shape (N, {self.n_in})")
        if not set(d2) <= set(d1):
            raise ValueError("second-order directions must also be first-order directions")
        jet = Jet(
            self._scale_inputs(X),
            {k: self._input_step(k) for k in d1},
            {k: None for k in d2},
        )
        layers = list(self.layers())
        for k, (w, b) in enumerate(layers):
            jet = jet.affine(w, b)
            jet = jet.activate(self.output_activation if k == len(layers) - 1 else self.activation)
        return jet

    def to_dict(self) -> dict:
        flat = np.asarray(ad.value_of(self.flat), dtype=float)
        weights, biases = [], []
        offset = 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            weights.append(flat[offset : offset + n_in * n_out].tolist())
            offset += n_in * n_out
            biases.append(flat[offset : offset + n_out].tolist())
            offset += n_out
        out = {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "output_activation": self.output_activation,
            "weights": weights,
            "biases": biases,
            "input_names": list(self.input_names),
        }
        if self.input_lower is not None:
            out["input_lower"] = list(self.input_lower)
            out["input_upper"] = list(self.input_upper)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "MLPParams":
        parts = []
        for w, b in zip(data["weights"], data["biases"]):
            parts.append(np.asarray(w, dtype=float).ravel())
            parts.append(np.asarray(b, dtype=float).ravel())
        return cls(
            tuple(data["layer_sizes"]),
            data["activation"],
            data.get("output_activation", "identity"),
            np.concatenate(parts) if parts else np.zeros(0),
            tuple(data["input_lower"]) if "input_lower" in data else None,
            tuple(data["input_upper"]) if "input_upper" in data else None,
            tuple(data["input_names"]) if "input_names" in data else None,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "MLPParams":
        return cls.from_dict(json.loads(text))


def _activate(z, name: str):
    if name == "tanh":
        return ad.tanh(z)
    if name == "relu":
        return ad.relu(z)
    if name == "leaky-relu":
        return ad.leaky_relu(z)
    if name == "sigmoid":
        return ad.sigmoid(z)
    return z


def count_params(layer_sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


def mlp_new(
    layer_sizes: Sequence[int],
    activation: str = "tanh",
    output_activation: str = "identity",
    init: str = "xavier-uniform",
    seed: int = 0,
    input_lower=None,
    input_upper=None,
    input_names=None,
) -> MLPParams:
    """Fresh network; Xavier-uniform weights, zero biases, reproducible from ``seed``."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or min(sizes) < 1:
        raise ValueError(f"invalid layer sizes {layer_sizes}")
    rng = np.random.default_rng(seed)
    parts = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        if init == "xavier-uniform":
            bound = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
        elif init == "zeros":
            w = np.zeros((n_in, n_out))
        else:
            raise ValueError(f"unknown init {init!r}")
        parts += [w.ravel(), np.zeros(n_out)]
    return MLPParams(
        sizes, activation, output_activation, np.concatenate(parts), input_lower, input_upper, input_names
    )


def mlp_forward(params: MLPParams, inputs) -> np.ndarray:
    return params.forward(np.asarray(inputs, dtype=float))


def punn(seed: int = 0, L: float = 1.0, T: float = 3.0, n_out: int = 1, hidden=(20,) * 8) -> MLPParams:
    """Density approximator with inputs (x, t) rescaled from the road/horizon box."""
    return mlp_new((2, *hidden, n_out), "tanh", "identity", seed=seed, input_lower=(0.0, 0.0), input_upper=(L, T))


def fd_surrogate(seed: int = 0, rho_max: float = 1.0, hidden=(20, 20)) -> MLPParams:
    """Small scalar map rho -> q used in place of a parametric flux."""
    return mlp_new(
        (1, *hidden, 1), "tanh", "identity", seed=seed,
        input_lower=(0.0,), input_upper=(rho_max,), input_names=("rho",),
    )


def generator(seed: int = 0, L: float = 1.0, T: float = 3.0, latent_dim: int = 1,
              hidden=(20, 40, 60, 80, 60, 40, 20), n_out: int = 2) -> MLPParams:
    names = ("x", "t") + tuple(f"z{i}" for i in range(latent_dim))
    lo = (0.0, 0.0) + (-3.0,) * latent_dim
    hi = (L, T) + (3.0,) * latent_dim
    return mlp_new((2 + latent_dim, *hidden, n_out), "relu", "identity", seed=seed,
                   input_lower=lo, input_upper=hi, input_names=names)


def discriminator(seed: int = 0, L: float = 1.0, T: float = 3.0, n_state: int = 2, n_extra: int = 0,
                  hidden=(20, 20, 40, 60, 80, 60, 40, 20, 20)) -> MLPParams:
    n_in = 2 + n_state + n_extra
    lo = (0.0, 0.0) + (0.0,) * (n_state + n_extra)
    hi = (L, T) + (1.0,) * (n_state + n_extra)
    return mlp_new((n_in, *hidden, 1), "relu", "sigmoid", seed=seed, input_lower=lo, input_upper=hi)
