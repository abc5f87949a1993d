"""Reverse-mode tape over numpy arrays plus forward-mode jets for input derivatives.

Two mechanisms cooperate here:

* :class:`Tape` / :class:`Var` record primitive operations on arrays and
  replay them backwards to obtain gradients of a scalar loss with respect to a
  flat parameter vector.
* :class:`Jet` carries ``(value, first derivatives, pure second derivatives)``
  of a network output with respect to its inputs.  Jets are propagated layer by
  layer with ordinary arithmetic, so when the weights are :class:`Var` objects
  every jet component is itself a tape node and the parameter gradient of a
  loss containing ``f_xx`` comes out of a single reverse sweep.

Every primitive (``tanh``, ``exp``, ``matmul``, ...) accepts either plain
arrays or :class:`Var` objects; plain inputs never touch a tape, which keeps
inference cheap and bit-identical to the differentiable path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class NumericOverflowError(FloatingPointError):
    """A primitive produced a non-finite value."""

    def __init__(self, op: str, node: int | None):
        self.op = op
        self.node = node
        where = f"tape node {node}" if node is not None else "untaped evaluation"
        super().__init__(f"non-finite value produced by '{op}' at {where}")


class Var:
    """A node on a :class:`Tape` holding an array value."""

    __slots__ = ("tape", "index", "value")
    # make numpy defer binary operators to the reflected Var methods
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"Var(#{self.index}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return asum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return amean(self, axis=axis, keepdims=keepdims)


class Tape:
    """Linear record of primitive operations, replayed in reverse index order."""

    def __init__(self, check_finite: bool = True):
        self.check_finite = check_finite
        self._ops: list[str] = []
        self._edges: list[tuple] = []
        self._vars: list[Var] = []

    def __len__(self) -> int:
        return len(self._ops)

    @property
    def ops(self) -> list[str]:
        return list(self._ops)

    def variable(self, value) -> Var:
        """Register a leaf (an independent variable)."""
        return self._push("leaf", np.array(value, dtype=float), ())

    def _push(self, op: str, value: np.ndarray, edges: tuple) -> Var:
        index = len(self._ops)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NumericOverflowError(op, index)
        var = Var(self, index, value)
        self._ops.append(op)
        self._edges.append(edges)
        self._vars.append(var)
        return var

    def gradient(self, output: Var, wrt: Var | Sequence[Var]):
        """Gradient of the scalar ``output`` with respect to one or more leaves."""
        if output.tape is not self:
            raise ValueError("output belongs to a different tape")
        if output.value.size != 1:
            raise ValueError("gradient requires a scalar output")
        targets = [wrt] if isinstance(wrt, Var) else list(wrt)
        keep = {v.index for v in targets}
        grads: list = [None] * (output.index + 1)
        grads[output.index] = np.ones_like(output.value)
        for i in range(output.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            for parent, vjp in self._edges[i]:
                contrib = _unbroadcast(np.asarray(vjp(g), dtype=float), parent.value.shape)
                j = parent.index
                grads[j] = contrib if grads[j] is None else grads[j] + contrib
            if i not in keep:
                grads[i] = None
        out = []
        for v in targets:
            g = grads[v.index] if v.index <= output.index else None
            out.append(np.zeros_like(v.value) if g is None else g)
        return out[0] if isinstance(wrt, Var) else out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _finite(op: str, value):
    if not np.all(np.isfinite(value)):
        raise NumericOverflowError(op, None)
    return value


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def value_of(a):
    """Strip the tape: return the plain array behind ``a``."""
    return a.value if isinstance(a, Var) else a


def _val(a):
    return a.value if isinstance(a, Var) else np.asarray(a, dtype=float)


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


def add(a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = av + bv
    if tape is None:
        return _finite("add", out)
    edges = tuple((p, lambda g: g) for p in (a, b) if isinstance(p, Var))
    return tape._push("add", out, edges)


def sub(a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = av - bv
    if tape is None:
        return _finite("sub", out)
    edges = []
    if isinstance(a, Var):
        edges.append((a, lambda g: g))
    if isinstance(b, Var):
        edges.append((b, lambda g: -g))
    return tape._push("sub", out, tuple(edges))


def neg(a):
    if not isinstance(a, Var):
        return -np.asarray(a, dtype=float)
    return a.tape._push("neg", -a.value, ((a, lambda g: -g),))


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = av * bv
    if tape is None:
        return _finite("mul", out)
    edges = []
    if isinstance(a, Var):
        edges.append((a, lambda g: g * bv))
    if isinstance(b, Var):
        edges.append((b, lambda g: g * av))
    return tape._push("mul", out, tuple(edges))


def div(a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv
    if tape is None:
        return _finite("div", out)
    edges = []
    if isinstance(a, Var):
        edges.append((a, lambda g: g / bv))
    if isinstance(b, Var):
        edges.append((b, lambda g: -g * out / bv))
    return tape._push("div", out, tuple(edges))


def power(a, exponent: float):
    """``a ** exponent`` for a constant exponent."""
    av = _val(a)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = av**exponent
    if not isinstance(a, Var):
        return _finite("power", out)

    def vjp(g):
        if exponent == 2:
            return g * 2.0 * av
        return g * exponent * av ** (exponent - 1)

    return a.tape._push("power", out, ((a, vjp),))


def _unary(op: str, a, fwd: Callable, dfwd: Callable):
    av = _val(a)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = fwd(av)
    if not isinstance(a, Var):
        return _finite(op, out)
    return a.tape._push(op, out, ((a, lambda g: g * dfwd(av, out)),))


def tanh(a):
    return _unary("tanh", a, np.tanh, lambda x, y: 1.0 - y * y)


def exp(a):
    return _unary("exp", a, np.exp, lambda x, y: y)


def log(a):
    return _unary("ln", a, np.log, lambda x, y: 1.0 / x)


def sqrt(a):
    return _unary("sqrt", a, np.sqrt, lambda x, y: 0.5 / y)


def sigmoid(a):
    return _unary("sigmoid", a, lambda x: 0.5 * (1.0 + np.tanh(0.5 * x)), lambda x, y: y * (1.0 - y))


def relu(a):
    # subgradient at 0 is the right derivative, 1
    return _unary("relu", a, lambda x: np.where(x >= 0.0, x, 0.0), lambda x, y: (x >= 0.0).astype(float))


def leaky_relu(a, slope: float = 0.01):
    return _unary(
        "leaky_relu",
        a,
        lambda x: np.where(x >= 0.0, x, slope * x),
        lambda x, y: np.where(x >= 0.0, 1.0, slope),
    )


def minimum(a, b):
    """Elementwise min; ties send the gradient to ``a``."""
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    pick_a = av <= bv
    out = np.where(pick_a, av, bv)
    if tape is None:
        return out
    edges = []
    if isinstance(a, Var):
        edges.append((a, lambda g: g * pick_a))
    if isinstance(b, Var):
        edges.append((b, lambda g: g * ~pick_a))
    return tape._push("min", out, tuple(edges))


def maximum(a, b):
    """Elementwise max; ties send the gradient to ``a``."""
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    pick_a = av >= bv
    out = np.where(pick_a, av, bv)
    if tape is None:
        return out
    edges = []
    if isinstance(a, Var):
        edges.append((a, lambda g: g * pick_a))
    if isinstance(b, Var):
        edges.append((b, lambda g: g * ~pick_a))
    return tape._push("max", out, tuple(edges))


def matmul(a, b):
    """2-D matrix product."""
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = av @ bv
    if tape is None:
        return _finite("matmul", out)
    edges = []
    if isinstance(a, Var):
        edges.append((a, lambda g: g @ bv.T))
    if isinstance(b, Var):
        edges.append((b, lambda g: av.T @ g))
    return tape._push("matmul", out, tuple(edges))


def asum(a, axis=None, keepdims=False):
    av = _val(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    if not isinstance(a, Var):
        return out
    shape = av.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return a.tape._push("sum", np.asarray(out, dtype=float), ((a, vjp),))


def amean(a, axis=None, keepdims=False):
    av = _val(a)
    n = av.size if axis is None else av.shape[axis]
    if n == 0:
        raise ValueError("mean of an empty array")
    return mul(asum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx):
    av = _val(a)
    out = av[idx]
    if not isinstance(a, Var):
        return out
    basic = _is_basic_index(idx)

    def vjp(g):
        full = np.zeros_like(av)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return full

    return a.tape._push("index", np.array(out, dtype=float), ((a, vjp),))


def reshape(a, shape):
    av = _val(a)
    out = av.reshape(shape)
    if not isinstance(a, Var):
        return out
    return a.tape._push("reshape", out, ((a, lambda g: g.reshape(av.shape)),))


def concatenate(items: Sequence, axis: int = -1):
    vals = [_val(v) for v in items]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*items)
    if tape is None:
        return out
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])
    edges = []
    for k, item in enumerate(items):
        if isinstance(item, Var):
            sl = [slice(None)] * out.ndim
            sl[ax] = slice(bounds[k], bounds[k + 1])
            sl = tuple(sl)
            edges.append((item, lambda g, sl=sl: g[sl]))
    return tape._push("concat", out, tuple(edges))


def square(a):
    return mul(a, a)


def stop_gradient(a):
    """Plain-array copy of ``a``; the tape does not see through it."""
    return np.array(value_of(a), dtype=float)


# --------------------------------------------------------------------------
# forward-mode jets
# --------------------------------------------------------------------------


def _jadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


def _jmul(a, b):
    if a is None or b is None:
        return None
    return mul(a, b)


@dataclass
class Jet:
    """Value of a function plus derivatives along named input directions.

    ``d1[k]`` holds the first derivative along direction ``k`` and ``d2[k]`` the
    pure second derivative along the same direction.  ``None`` entries stand for
    identically zero derivatives.
    """

    value: object
    d1: dict = field(default_factory=dict)
    d2: dict = field(default_factory=dict)

    def column(self, j: int) -> "Jet":
        """Restrict every component to output column ``j`` (kept 2-D)."""
        return Jet(
            _pick_col(self.value, j),
            {k: _pick_col(v, j) for k, v in self.d1.items()},
            {k: _pick_col(v, j) for k, v in self.d2.items()},
        )

    def affine(self, matrix, bias=None) -> "Jet":
        """Jet of ``self @ matrix + bias``."""
        value = matmul(self.value, matrix)
        if bias is not None:
            value = add(value, bias)
        d1 = {k: None if v is None else matmul(v, matrix) for k, v in self.d1.items()}
        d2 = {k: None if v is None else matmul(v, matrix) for k, v in self.d2.items()}
        return Jet(value, d1, d2)

    def _through(self, value, slope, curvature) -> "Jet":
        # chain rule: f(z)' = f'(z) z', f(z)'' = f'(z) z'' + f''(z) z'^2
        d1 = {k: _jmul(slope, v) for k, v in self.d1.items()}
        d2 = {}
        for k, v in self.d2.items():
            zk = self.d1.get(k)
            term = _jmul(slope, v)
            if curvature is not None and zk is not None:
                term = _jadd(term, mul(curvature, mul(zk, zk)))
            d2[k] = term
        return Jet(value, d1, d2)

    def tanh(self) -> "Jet":
        a = tanh(self.value)
        slope = sub(1.0, mul(a, a))
        curvature = mul(-2.0, mul(a, slope)) if self.d2 else None
        return self._through(a, slope, curvature)

    def relu(self) -> "Jet":
        mask = (_val(self.value) >= 0.0).astype(float)
        return self._through(relu(self.value), mask, None)

    def leaky_relu(self, slope: float = 0.01) -> "Jet":
        s = np.where(_val(self.value) >= 0.0, 1.0, slope)
        return self._through(leaky_relu(self.value, slope), s, None)

    def sigmoid(self) -> "Jet":
        s = sigmoid(self.value)
        slope = mul(s, sub(1.0, s))
        curvature = mul(slope, sub(1.0, mul(2.0, s))) if self.d2 else None
        return self._through(s, slope, curvature)

    def activate(self, name: str) -> "Jet":
        if name == "tanh":
            return self.tanh()
        if name == "relu":
            return self.relu()
        if name == "leaky-relu":
            return self.leaky_relu()
        if name == "sigmoid":
            return self.sigmoid()
        if name == "identity":
            return self
        raise ValueError(f"unknown activation {name!r}")


def _pick_col(a, j):
    if a is None:
        return None
    return getitem(a, (slice(None), slice(j, j + 1)))


# --------------------------------------------------------------------------
# public differentiation entry points
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DiffResult:
    value: float
    d_dx: float
    d_dt: float
    d2_dx2: float


def eval_with_input_derivs(net, point, output: int = 0) -> DiffResult:
    """Network output at ``point = (x, t)`` with exact ``f_x``, ``f_t``, ``f_xx``."""
    x, t = (point.x, point.t) if hasattr(point, "x") else point
    jet = net.jet(np.array([[x, t]], dtype=float), d1=("x", "t"), d2=("x",))

    def scalar(a):
        return 0.0 if a is None else float(np.asarray(_val(a))[0, output])

    return DiffResult(
        scalar(jet.value), scalar(jet.d1["x"]), scalar(jet.d1["t"]), scalar(jet.d2["x"])
    )


def value_and_grad(loss_builder: Callable, params_flat) -> tuple[float, np.ndarray]:
    """Evaluate ``loss_builder(params)`` and its gradient in one reverse sweep."""
    params_flat = np.asarray(params_flat, dtype=float)
    if params_flat.ndim != 1:
        raise ValueError("params_flat must be a 1-D vector")
    tape = Tape()
    p = tape.variable(params_flat)
    loss = loss_builder(p)
    if not isinstance(loss, Var):
        # loss does not depend on the parameters
        return float(np.asarray(loss)), np.zeros_like(params_flat)
    grad = tape.gradient(loss, p)
    if grad.shape != params_flat.shape:
        raise ValueError("gradient shape does not match params_flat")
    return float(loss.value), grad


def grad_params(loss_builder: Callable, params_flat) -> np.ndarray:
    return value_and_grad(loss_builder, params_flat)[1]


def check_gradient(loss_builder: Callable, params, h: float = 1e-6, coords=None, stencil: int = 2) -> float:
    """Worst coordinate-wise relative error between reverse mode and central differences.

    The denominator is ``max(|analytic|, |numeric|, 1e-8)``.

    Args:
        loss_builder: Maps a flat parameter vector to a scalar loss.
        params: Point at which to compare.
        h: Difference step.
        coords: Indices to check; all coordinates by default.
        stencil: 2 for the classic central difference, 4 for the fourth-order one.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if stencil not in (2, 4):
        raise ValueError("stencil must be 2 or 4")
    params = np.asarray(params, dtype=float)
    if params.size == 0:
        return 0.0
    analytic = grad_params(loss_builder, params)
    idx = range(params.size) if coords is None else coords

    def f(i, step):
        shifted = params.copy()
        shifted[i] += step
        return float(value_of(loss_builder(shifted)))

    worst = 0.0
    for i in idx:
        if stencil == 2:
            numeric = (f(i, h) - f(i, -h)) / (2 * h)
        else:
            numeric = (8 * (f(i, h) - f(i, -h)) - (f(i, 2 * h) - f(i, -2 * h))) / (12 * h)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
