"""Approximations w.r.t. the number of blocks ``n_b``.

The per-block MGF ``p(zeta) = E[g(zeta)^{n_s}]`` and its first two
derivatives are estimated by Monte Carlo over i.i.d. fade samples; the
per-block CGF ``gamma = log p`` then drives the same tail expansion as the
conditional approximation, with ``n = n_b`` and per-block threshold
``n_c R``.  All evaluations at different ``zeta`` reuse one fixed set of
channel draws, which makes the estimated ``gamma`` a smooth convex function.

Sample means are kept in scaled form, ``p = exp(log_scale) * m0``, because
``g^{n_s}`` over- or underflows for a few hundred symbols per block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channel_siso import DEFAULT_CHUNK, draw_chunked
from .density import (
    CgfEval,
    FadeSample,
    LinkParams,
    RocError,
    _roc_from_coeffs,
    block_coeffs,
    kappa_from_coeffs,
)
from .numerics import StreamKey, q_function
from .saddle import REGIMES, SaddlepointResult, margin_bracket, regime_of, solve_increasing, tail_expansion

__all__ = [
    "PEstimate",
    "SampleSet",
    "estimate_p",
    "gamma_eval",
    "gamma_replicates",
    "solve_saddlepoint_nb",
    "saddlepoint_nb",
    "normal_nb",
    "normal_nb_estimate",
    "JACKKNIFE_GROUPS",
]

JACKKNIFE_GROUPS = 32
INITIAL_BRACKET = (-0.5, 1.5)


@dataclass(frozen=True)
class PEstimate:
    """Monte-Carlo estimate of ``p, p', p''`` at ``zeta`` from common draws.

    ``m0, m1, m2`` are the sample means divided by ``exp(log_scale)``;
    ``group_sums`` (shape ``(G, 3)``, same scaling) and ``group_counts`` feed
    the jackknife.
    """

    zeta: float
    n_samples: int
    log_scale: float
    m0: float
    m1: float
    m2: float
    se0: float
    se1: float
    se2: float
    group_sums: np.ndarray
    group_counts: np.ndarray

    @property
    def p(self) -> float:
        return math.exp(self.log_scale) * self.m0

    @property
    def dp(self) -> float:
        return math.exp(self.log_scale) * self.m1

    @property
    def d2p(self) -> float:
        return math.exp(self.log_scale) * self.m2

    @property
    def se_p(self) -> float:
        return math.exp(self.log_scale) * self.se0

    @property
    def se_dp(self) -> float:
        return math.exp(self.log_scale) * self.se1

    @property
    def se_d2p(self) -> float:
        return math.exp(self.log_scale) * self.se2


def _jackknife_se(full: np.ndarray, reps: np.ndarray) -> np.ndarray:
    """Delete-one-group jackknife standard error; ``reps`` has groups on axis 0."""
    g = reps.shape[0]
    if g < 2:
        return np.zeros(np.shape(full))
    if not np.all(np.isfinite(reps)):
        return np.full(np.shape(full), np.inf)
    dev = reps - np.mean(reps, axis=0)
    return np.sqrt((g - 1) / g * np.sum(dev * dev, axis=0))


class SampleSet:
    """Block coefficients of a fixed set of fade samples, evaluated at any ``zeta``.

    Only the three numbers per sample that the CGF needs are retained
    (``beta - alpha``, ``alpha beta (1 - nu)`` and the log term), together
    with the intersection of all per-sample ROCs.
    """

    def __init__(self, fs: FadeSample, lp: LinkParams, groups: int = JACKKNIFE_GROUPS):
        fs = fs.reshape(-1)
        co = block_coeffs(fs, lp)
        self.n_s = lp.n_s
        self.n = int(fs.shape[0])
        self.coeffs = co
        lo, hi = _roc_from_coeffs(co)
        self.roc = (float(np.max(lo)), float(np.min(hi)))
        n_groups = max(1, min(int(groups), self.n))
        self.group_starts = np.array([a[0] for a in np.array_split(np.arange(self.n), n_groups)])
        self.group_counts = np.diff(np.append(self.group_starts, self.n))

    @classmethod
    def draw(cls, sampler, lp: LinkParams, n_draws: int, key: StreamKey,
             chunk_size: int = DEFAULT_CHUNK, workers: int = 1) -> "SampleSet":
        return cls(draw_chunked(sampler, n_draws, key, chunk_size, workers), lp)

    def estimate(self, zeta: float) -> PEstimate:
        """``p, p', p''`` at ``zeta``; aborts if any sample's ROC excludes it."""
        zeta = float(zeta)
        k = kappa_from_coeffs(zeta, self.coeffs)
        ns = self.n_s
        x = ns * np.atleast_1d(k.value)
        d1 = ns * np.atleast_1d(k.d1)
        d2 = ns * np.atleast_1d(k.d2)
        scale = float(np.max(x))
        w = np.exp(x - scale)
        terms = np.stack([w, w * d1, w * (d1 * d1 + d2)], axis=1)
        sums = np.add.reduceat(terms, self.group_starts, axis=0)
        total = np.sum(sums, axis=0)
        means = total / self.n
        reps = (total - sums) / (self.n - self.group_counts)[:, None] if sums.shape[0] > 1 else sums
        se = _jackknife_se(means, reps)
        return PEstimate(zeta=zeta, n_samples=self.n, log_scale=scale,
                         m0=float(means[0]), m1=float(means[1]), m2=float(means[2]),
                         se0=float(se[0]), se1=float(se[1]), se2=float(se[2]),
                         group_sums=sums, group_counts=self.group_counts.copy())

    def gamma(self, zeta: float) -> CgfEval:
        return gamma_eval(self.estimate(zeta))


def estimate_p(zeta: float, sampler, lp: LinkParams, n_draws: int, key: StreamKey,
               chunk_size: int = DEFAULT_CHUNK, workers: int = 1) -> PEstimate:
    """Estimate ``p(zeta) = E[g^{n_s}]``, ``p'`` and ``p''`` from ``n_draws`` blocks.

    Raises
    ------
    RocError
        If ``zeta`` lies outside the ROC of any sampled block; the exception
        carries the number of offending samples.
    """
    return SampleSet.draw(sampler, lp, n_draws, key, chunk_size, workers).estimate(zeta)


def gamma_eval(pe: PEstimate) -> CgfEval:
    """``gamma = log p``, ``gamma' = p'/p``, ``gamma'' = (p'' p - p'^2)/p^2``."""
    if not pe.m0 > 0:
        raise ValueError("p must be positive")
    r1 = pe.m1 / pe.m0
    return CgfEval(pe.log_scale + math.log(pe.m0), r1, pe.m2 / pe.m0 - r1 * r1)


def gamma_replicates(pe: PEstimate) -> CgfEval:
    """Delete-one-group jackknife replicates of ``gamma, gamma', gamma''``.

    A replicate whose remaining weight underflows to zero (one group carries
    all of ``p``) is returned as NaN, which propagates into an infinite
    standard error.
    """
    total = np.sum(pe.group_sums, axis=0)
    rest = total - pe.group_sums
    cnt = pe.n_samples - pe.group_counts
    m = rest / cnt[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        m0 = np.where(m[:, 0] > 0, m[:, 0], np.nan)
        r1 = m[:, 1] / m0
        return CgfEval(pe.log_scale + np.log(m0), r1, m[:, 2] / m0 - r1 * r1)


def solve_saddlepoint_nb(sampler, lp: LinkParams, n_draws: int, key: StreamKey, *,
                         samples: SampleSet | None = None, ftol: float = 1e-10,
                         chunk_size: int = DEFAULT_CHUNK, workers: int = 1):
    """Root of ``R + gamma'(zeta)/n_c = 0`` on common random numbers.

    Returns ``(zeta, cgf_at_root, clipped, samples)``.  The bracket starts
    at ``[-0.5, 1.5]`` (clipped to the sample ROC) and each side is doubled
    until the sign changes or the ROC edge minus its margin is reached; in
    the latter case the root is clamped to that edge and ``clipped`` is set.
    """
    ss = samples if samples is not None else SampleSet.draw(sampler, lp, n_draws, key, chunk_size, workers)
    target = lp.n_c * lp.rate
    lo_m, hi_m = (float(v) for v in margin_bracket(*ss.roc))

    def f(z):
        return (ss.gamma(z).d1 + target) / target

    a = max(INITIAL_BRACKET[0], lo_m)
    while f(a) > 0 and a > lo_m:
        a = max(2.0 * a, lo_m)
        if a < -1e6:
            break
    b = min(INITIAL_BRACKET[1], hi_m)
    while f(b) < 0 and b < hi_m:
        b = min(2.0 * b, hi_m)
        if b > 1e6:
            break

    def fun(z):
        g = ss.gamma(float(z[0]))
        return np.array([(g.d1 + target) / target]), np.array([g.d2 / target])

    root, clipped = solve_increasing(fun, a, b, x0=min(max(0.0, a), b), ftol=ftol)
    zeta = float(root[0])
    return zeta, ss.gamma(zeta), bool(clipped[0]), ss


def _expansion(lp: LinkParams, zeta: float, cgf: CgfEval, cgf_one: CgfEval | None):
    return tail_expansion(lp.n_b, zeta, cgf, lp.n_c * lp.rate, cgf_one=cgf_one)


def saddlepoint_nb(sampler, lp: LinkParams, n_draws: int, key: StreamKey, *,
                   samples: SampleSet | None = None, chunk_size: int = DEFAULT_CHUNK,
                   workers: int = 1) -> SaddlepointResult:
    """Saddlepoint expansion w.r.t. ``n_b`` with Monte-Carlo estimated ``gamma``.

    ``diagnostics['std_error']`` is a jackknife error of epsilon obtained by
    re-evaluating the expansion at the fixed root with each replicate CGF.
    """
    ss = samples if samples is not None else SampleSet.draw(sampler, lp, n_draws, key, chunk_size, workers)
    g0 = ss.estimate(0.0)
    diag = {"n_samples": float(ss.n)}
    if not gamma_eval(g0).d2 > 0:
        # -i_s is deterministic: the tail event has probability min(1, exp(T + n_b gamma'(0)))
        expo = lp.threshold + lp.n_b * gamma_eval(g0).d1
        low = expo >= 0
        diag.update(exponent=expo, d2=0.0, std_error=0.0)
        return SaddlepointResult(epsilon=min(1.0, math.exp(min(expo, 0.0))),
                                 zeta=-math.inf if low else math.inf,
                                 regime="low" if low else "high", clipped=True, diagnostics=diag)
    zeta, cgf, clipped, _ = solve_saddlepoint_nb(sampler, lp, n_draws, key, samples=ss)
    reg = int(regime_of(zeta))
    pe1 = ss.estimate(1.0) if reg == 1 else None
    cgf_one = gamma_eval(pe1) if pe1 is not None else None
    eps, expo = _expansion(lp, zeta, cgf, cgf_one)

    pe = ss.estimate(zeta)
    reps = gamma_replicates(pe)
    reps_one = gamma_replicates(pe1) if pe1 is not None else None
    finite = all(np.all(np.isfinite(c.value)) for c in (reps, reps_one) if c is not None)
    rep_eps = np.full(len(reps.value), np.nan) if not finite else np.array([
        _expansion(lp, zeta, CgfEval(reps.value[i], reps.d1[i], reps.d2[i]),
                   None if reps_one is None else
                   CgfEval(reps_one.value[i], reps_one.d1[i], reps_one.d2[i]))[0]
        for i in range(len(reps.value))
    ])
    diag.update(exponent=float(expo), d2=float(cgf.d2),
                std_error=float(_jackknife_se(np.asarray(eps), rep_eps)))
    return SaddlepointResult(epsilon=float(eps), zeta=zeta, regime=REGIMES[reg],
                             clipped=clipped, diagnostics=diag)


def _normal_from_cgf(lp: LinkParams, d1, d2):
    """``Q(sqrt(n_b) (-gamma'(0) - n_c R) / sqrt(gamma''(0)))`` with a step at zero variance."""
    num = math.sqrt(lp.n_b) * (-np.asarray(d1) - lp.n_c * lp.rate)
    d2 = np.asarray(d2, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(d2 > 0, q_function(num / np.sqrt(np.where(d2 > 0, d2, 1.0))),
                        np.where(num < 0, 1.0, 0.0))


def normal_nb_estimate(sampler, lp: LinkParams, n_draws: int, key: StreamKey, *,
                       samples: SampleSet | None = None, chunk_size: int = DEFAULT_CHUNK,
                       workers: int = 1):
    """Normal approximation w.r.t. ``n_b`` and its jackknife standard error.

    The mean ``n_s E[I_s]`` and variance ``n_s E[V_s] + n_s^2 Var[I_s]`` are
    read off ``-gamma'(0)`` and ``gamma''(0)`` of the same draws.
    """
    ss = samples if samples is not None else SampleSet.draw(sampler, lp, n_draws, key, chunk_size, workers)
    pe = ss.estimate(0.0)
    g = gamma_eval(pe)
    eps = float(_normal_from_cgf(lp, g.d1, g.d2))
    reps = gamma_replicates(pe)
    se = float(_jackknife_se(np.asarray(eps), _normal_from_cgf(lp, reps.d1, reps.d2)))
    return eps, se


def normal_nb(sampler, lp: LinkParams, n_draws: int, key: StreamKey, **kw) -> float:
    """Normal approximation w.r.t. ``n_b``; see :func:`normal_nb_estimate`."""
    return normal_nb_estimate(sampler, lp, n_draws, key, **kw)[0]
