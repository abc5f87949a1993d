"""Adam and L-BFGS on flat parameter vectors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns new arrays, inputs are left untouched."""
    if params.shape != grad.shape or grad.shape != state.m.shape:
        raise ValueError("params, grad and state shapes differ")
    k = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**k)
    v_hat = v / (1.0 - beta2**k)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, k)


@dataclass
class LBFGSResult:
    x: np.ndarray
    f: float
    iterations: int
    status: str
    trace: list = field(default_factory=list)
    evaluations: int = 0


def _cubic_min(a, fa, da, b, fb, db):
    """Minimizer of the cubic interpolating (a, fa, da) and (b, fb, db), or None."""
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc < 0:
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    denom = db - da + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / denom


def strong_wolfe(phi: Callable, f0: float, d0: float, alpha0: float = 1.0, c1: float = 1e-4,
                 c2: float = 0.9, max_iter: int = 25, alpha_max: float = 1e10):
    """Line search satisfying the strong Wolfe conditions.

    ``phi(alpha)`` returns ``(f, dphi, payload)``.  The accepted step is always
    the most recently evaluated one.  Returns ``(alpha, f, payload, ok)``.
    """
    a_prev, f_prev, d_prev = 0.0, f0, d0
    alpha = alpha0
    best = None

    def zoom(lo, f_lo, d_lo, hi, f_hi, d_hi):
        nonlocal best
        for _ in range(max_iter):
            width = hi - lo
            if abs(width) < 1e-16 * max(1.0, abs(lo)):
                break
            trial = _cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi)
            left, right = min(lo, hi), max(lo, hi)
            margin = 0.1 * (right - left)
            if trial is None or not (left + margin <= trial <= right - margin):
                trial = 0.5 * (lo + hi)
            f, d, pay = phi(trial)
            if f > f0 + c1 * trial * d0 or f >= f_lo:
                hi, f_hi, d_hi = trial, f, d
            else:
                best = (trial, f, pay)
                if abs(d) <= -c2 * d0:
                    return trial, f, pay, True
                if d * (hi - lo) >= 0:
                    hi, f_hi, d_hi = lo, f_lo, d_lo
                lo, f_lo, d_lo = trial, f, d
        return None

    for i in range(max_iter):
        f, d, pay = phi(alpha)
        if not math.isfinite(f):
            # overshoot into a non-finite region: shrink
            alpha = 0.5 * (a_prev + alpha)
            continue
        if f > f0 + c1 * alpha * d0 or (i > 0 and f >= f_prev):
            out = zoom(a_prev, f_prev, d_prev, alpha, f, d)
            break
        if abs(d) <= -c2 * d0:
            return alpha, f, pay, True
        best = (alpha, f, pay)
        if d >= 0:
            out = zoom(alpha, f, d, a_prev, f_prev, d_prev)
            break
        a_prev, f_prev, d_prev = alpha, f, d
        alpha = min(2.0 * alpha, alpha_max)
    else:
        out = None
    if out is not None:
        return out
    if best is not None:
        return best[0], best[1], best[2], False
    return 0.0, f0, None, False


def lbfgs_minimize(fun: Callable, x0, memory: int = 10, tolerance: float = 1e-16, max_iterations: int = 5000,
                   c1: float = 1e-4, c2: float = 0.9, callback: Callable | None = None) -> LBFGSResult:
    """Minimize ``fun(x) -> (f, grad)`` with two-loop L-BFGS and a strong-Wolfe line search.

    Stops when ``|f_k - f_{k-1}| <= tolerance``, on a zero gradient, after
    ``max_iterations``, or when the line search fails (status ``"line-search"``).
    ``callback(k, x, f)`` runs after every accepted step.
    """
    x = np.array(x0, dtype=float)
    evals = 0

    def evaluate(z):
        nonlocal evals
        evals += 1
        f, g = fun(z)
        return float(f), np.asarray(g, dtype=float)

    f, g = evaluate(x)
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    trace = [f]
    if not np.any(g):
        return LBFGSResult(x, f, 0, "converged", trace, evals)
    status = "max-iterations"
    k = 0
    while k < max_iterations:
        q = -g
        alphas = []
        for s, y in zip(reversed(s_hist), reversed(y_hist)):
            rho = 1.0 / float(y @ s)
            a = rho * float(s @ q)
            q = q - a * y
            alphas.append((rho, a))
        if s_hist:
            q = q * (float(s_hist[-1] @ y_hist[-1]) / float(y_hist[-1] @ y_hist[-1]))
        for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
            b = rho * float(y @ q)
            q = q + (a - b) * s
        direction = q
        slope = float(g @ direction)
        if not slope < 0:
            direction = -g
            slope = -float(g @ g)
            s_hist.clear()
            y_hist.clear()
        alpha0 = 1.0 if s_hist else min(1.0, 1.0 / float(np.sum(np.abs(g))))

        def phi(alpha):
            z = x + alpha * direction
            fz, gz = evaluate(z)
            return fz, float(gz @ direction), (z, gz)

        alpha, f_new, payload, ok = strong_wolfe(phi, f, slope, alpha0, c1, c2)
        if payload is None:
            status = "line-search"
            break
        x_new, g_new = payload
        s_vec = x_new - x
        y_vec = g_new - g
        k += 1
        if float(s_vec @ y_vec) > 1e-12 * float(np.linalg.norm(s_vec) * np.linalg.norm(y_vec)):
            s_hist.append(s_vec)
            y_hist.append(y_vec)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
        else:
            # curvature condition failed: restart from steepest descent
            s_hist.clear()
            y_hist.clear()
        change = abs(f_new - f)
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        if callback is not None:
            callback(k, x, f)
        if not ok:
            status = "line-search"
            break
        if change <= tolerance:
            status = "converged"
            break
        if not np.any(g):
            status = "converged"
            break
    return LBFGSResult(x, f, k, status, trace, evals)
