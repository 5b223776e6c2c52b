"""Saddlepoint tail expansions of the RCUs event and the root solver.

Both approximations share one structure.  Let ``S`` be a sum of ``n`` i.i.d.
units of ``-i_s`` with CGF ``L`` (``n = n_s`` with ``L = kappa`` given the
channel, or ``n = n_b`` with ``L = gamma``), and ``T = n_c n_b R``.  The error
event has probability ``E[min(1, exp(S + T))]``.  Tilting by ``zeta`` and
replacing the tilted sum by a Gaussian with mean ``mu = n (L'(zeta) + T/n)``
and variance ``v = n L''(zeta)`` gives the expansions below; at the
saddlepoint ``mu = 0`` and they reduce to the Psi/Phi kernel forms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .density import CgfEval
from .numerics import exp_q_scaled, q_function

__all__ = [
    "SaddlepointResult",
    "REGIMES",
    "tail_expansion",
    "regime_of",
    "solve_increasing",
    "margin_bracket",
]

REGIMES = ("mid", "high", "low")


@dataclass
class SaddlepointResult:
    epsilon: float
    zeta: float
    regime: str
    clipped: bool = False
    diagnostics: dict = field(default_factory=dict)


def regime_of(zeta):
    """0 = mid (0 <= zeta <= 1), 1 = high (zeta > 1), 2 = low (zeta < 0)."""
    zeta = np.asarray(zeta, dtype=float)
    return np.where(zeta > 1.0, 1, np.where(zeta < 0.0, 2, 0))


def _upper(E, u, mu, v):
    """exp(E) * int_{y>=0} exp(-u y) dN(mu, v)."""
    sv = np.sqrt(v)
    return exp_q_scaled(E - u * mu + 0.5 * u * u * v, u * sv - mu / sv)


def _lower(E, u, mu, v):
    """exp(E) * int_{y<0} exp(u y) dN(mu, v)."""
    sv = np.sqrt(v)
    return exp_q_scaled(E + u * mu + 0.5 * u * u * v, u * sv + mu / sv)


def _one_minus_lower(E, u, mu, v):
    """``1 - _lower(E, u, mu, v)`` as ``Q(-y) - expm1(A) Q(y)``, free of cancellation near 1."""
    sv = np.sqrt(v)
    A = E + u * mu + 0.5 * u * u * v
    y = u * sv + mu / sv
    return q_function(-y) - np.expm1(A) * q_function(y)


def tail_expansion(n, zeta, cgf: CgfEval, per_unit_threshold, cgf_one: CgfEval | None = None,
                   regime=None):
    """Evaluate the expansion at ``zeta`` for each element (vectorized).

    ``cgf`` holds ``L, L', L''`` at ``zeta`` and ``cgf_one`` at ``zeta = 1``
    (needed only where the high regime applies).  ``per_unit_threshold`` is
    ``T / n``.  Returns ``(epsilon, exponent)``; epsilon is clamped to [0, 1].
    """
    zeta = np.asarray(zeta, dtype=float)
    thr = np.asarray(per_unit_threshold, dtype=float)
    reg = regime_of(zeta) if regime is None else np.broadcast_to(np.asarray(regime), zeta.shape)
    value, d1, d2 = (np.asarray(x, dtype=float) for x in (cgf.value, cgf.d1, cgf.d2))
    zeta, thr, value, d1, d2, reg = np.broadcast_arrays(zeta, thr, value, d1, d2, reg)

    E = np.array(n * (value + zeta * thr), dtype=float)
    mu = n * (d1 + thr)
    v = n * d2
    eps = np.empty(zeta.shape)
    with np.errstate(over="ignore", invalid="ignore"):
        m = reg == 0
        if np.any(m):
            eps[m] = _upper(E[m], zeta[m], mu[m], v[m]) + _lower(E[m], 1.0 - zeta[m], mu[m], v[m])
        m = reg == 2
        if np.any(m):
            b = _lower(E[m], 1.0 - zeta[m], mu[m], v[m])
            eps[m] = _one_minus_lower(E[m], -zeta[m], mu[m], v[m]) + b
        m = reg == 1
        if np.any(m):
            if cgf_one is None:
                raise ValueError("high-regime evaluation needs the CGF at zeta = 1")
            v1, d11, d21 = (np.broadcast_to(np.asarray(x, dtype=float), zeta.shape)[m]
                            for x in (cgf_one.value, cgf_one.d1, cgf_one.d2))
            E1 = n * (v1 + thr[m])
            mu1 = n * (d11 + thr[m])
            w1 = n * d21
            eps[m] = _upper(E1, 1.0, mu1, w1) + np.exp(E1) * q_function(mu1 / np.sqrt(w1))
            E[m] = E1
    eps = np.clip(np.nan_to_num(eps, nan=1.0, posinf=1.0), 0.0, 1.0)
    if eps.ndim == 0:
        return float(eps), float(E)
    return eps, E


def solve_increasing(fun: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]], lo, hi,
                     x0=0.0, ftol=1e-10, max_iter=200, expand_from=1.0):
    """Vectorized safeguarded Newton/bisection for an increasing function.

    ``fun(x)`` returns ``(f, f')``.  ``lo``/``hi`` may be infinite; infinite
    sides are expanded geometrically from ``expand_from``.  Returns
    ``(root, clipped)`` where clipped marks elements without a sign change,
    whose root is set to the offending bracket end.
    """
    lo = np.array(lo, dtype=float, ndmin=1)
    hi = np.array(hi, dtype=float, ndmin=1)
    lo, hi = np.broadcast_arrays(lo, hi)
    lo, hi = lo.copy(), hi.copy()
    x = np.clip(np.broadcast_to(np.asarray(x0, dtype=float), lo.shape).copy(), lo, hi)
    clipped = np.zeros(lo.shape, dtype=bool)

    # finite brackets: expand infinite sides until the sign is right
    for side, sign in ((lo, -1.0), (hi, 1.0)):
        inf = ~np.isfinite(side)
        if np.any(inf):
            step = np.full(side.shape, sign * expand_from)
            cur = np.where(inf, step, side)
            for _ in range(60):
                f, _ = fun(cur)
                need = inf & ((f > 0) if sign < 0 else (f < 0))
                if not np.any(need):
                    break
                cur = np.where(need, cur * 2.0, cur)
            side[:] = cur

    flo, _ = fun(lo)
    fhi, _ = fun(hi)
    below = flo > 0
    above = fhi < 0
    clipped |= below | above
    root = np.where(below, lo, np.where(above, hi, np.nan))
    active = ~clipped
    x = np.where(active, np.clip(x, lo, hi), root)
    for _ in range(max_iter):
        if not np.any(active):
            break
        f, df = fun(x)
        done = active & (np.abs(f) <= ftol)
        root = np.where(done, x, root)
        active &= ~done
        lo = np.where(active & (f < 0), x, lo)
        hi = np.where(active & (f > 0), x, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            xn = x - f / df
        bad = ~np.isfinite(xn) | (xn <= lo) | (xn >= hi)
        xn = np.where(bad, 0.5 * (lo + hi), xn)
        narrow = active & (hi - lo <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(x)))
        root = np.where(narrow, xn, root)
        active &= ~narrow
        x = np.where(active, xn, x)
    root = np.where(np.isnan(root), x, root)
    return root, clipped


def margin_bracket(lo, hi, rel=1e-6):
    """Shrink ``(lo, hi)`` by ``rel`` times its width on each finite side."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    width = hi - lo
    m = np.where(np.isfinite(width), rel * width,
                 rel * np.maximum(1.0, np.where(np.isfinite(lo), np.abs(lo), np.abs(hi))))
    return lo + np.where(np.isfinite(lo), m, 0.0), hi - np.where(np.isfinite(hi), m, 0.0)

