"""Approximations w.r.t. the number of data symbols per block.

Given the channel and its estimate in all ``n_b`` blocks, the RCUs tail
probability is approximated either by a Gaussian tail (normal approximation)
or by the saddlepoint expansion in ``n_s``.  The unconditional value is the
Monte-Carlo average of the conditional one over channel realizations.
"""

from __future__ import annotations

import math

import numpy as np

from .density import (
    BlockCoeffs,
    CgfEval,
    FadeSample,
    LinkParams,
    RocError,
    _roc_from_coeffs,
    block_coeffs,
    kappa_from_coeffs,
    mean_variance,
)
from .channel_siso import PointMass
from .numerics import StreamKey, chunk_sizes, map_chunks, q_function
from .saddle import REGIMES, SaddlepointResult, margin_bracket, regime_of, solve_increasing, tail_expansion

__all__ = [
    "kappa_sum",
    "normal_ns",
    "saddlepoint_ns",
    "saddlepoint_ns_batch",
    "conditional_epsilon",
    "average_over_channels",
    "METHODS_NS",
    "RocError",
]

METHODS_NS = ("normal_ns", "saddlepoint_ns")


def _as_blocks(blocks) -> FadeSample:
    if isinstance(blocks, FadeSample):
        fs = blocks
    else:
        blocks = list(blocks)
        if not blocks:
            raise ValueError("empty block list")
        fs = FadeSample(np.array([b.h for b in blocks], dtype=complex),
                        np.array([b.h_hat for b in blocks], dtype=complex),
                        np.array([b.sigma2_block for b in blocks], dtype=float))
    if fs.shape == ():
        fs = fs.reshape(1)
    if fs.shape[-1] == 0:
        raise ValueError("empty block list")
    return fs


def _sum_last(c: CgfEval) -> CgfEval:
    return CgfEval(*(np.sum(np.asarray(x), axis=-1) for x in (c.value, c.d1, c.d2)))


def _intersected_roc(co: BlockCoeffs):
    lo, hi = _roc_from_coeffs(co)
    return np.max(lo, axis=-1), np.min(hi, axis=-1)


def kappa_sum(zeta, blocks, lp: LinkParams) -> CgfEval:
    """``kappa = sum_l kappa_l`` and derivatives; blocks along the last axis."""
    fs = _as_blocks(blocks)
    co = block_coeffs(fs, lp)
    z = np.asarray(zeta, dtype=float)[..., None]
    res = _sum_last(kappa_from_coeffs(z, co))
    if np.ndim(res.value) == 0:
        return CgfEval(float(res.value), float(res.d1), float(res.d2))
    return res


def normal_ns(blocks, lp: LinkParams):
    """Conditional normal approximation ``Q((n_s sum I_s - n_c n_b R) / sqrt(n_s sum V_s))``."""
    fs = _as_blocks(blocks)
    i_s, v_s = mean_variance(fs, lp)
    num = lp.n_s * np.sum(np.asarray(i_s), axis=-1) - lp.threshold
    var = lp.n_s * np.sum(np.asarray(v_s), axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(var > 0, q_function(num / np.sqrt(np.where(var > 0, var, 1.0))),
                       np.where(num < 0, 1.0, 0.0))
    return float(out) if out.ndim == 0 else out


def saddlepoint_ns_batch(blocks: FadeSample, lp: LinkParams, ftol: float = 1e-10):
    """Vectorized conditional saddlepoint expansion over leading axes.

    Returns a dict of arrays: epsilon, zeta, regime (0 mid / 1 high / 2 low),
    clipped, exponent and d2 (``kappa''`` at the root).
    """
    fs = _as_blocks(blocks)
    co = block_coeffs(fs, lp)
    lo, hi = _intersected_roc(co)
    lo, hi = np.atleast_1d(lo), np.atleast_1d(hi)
    lo_m, hi_m = margin_bracket(lo, hi)
    n = lp.n_s
    thr = lp.threshold / n
    batch_shape = lo.shape

    # blocks whose information density is deterministic need no expansion
    i_s = np.asarray(co.log_term) + np.asarray(co.beta) - np.asarray(co.alpha)
    v_tot = np.sum(2.0 * np.asarray(co.quad) + (np.asarray(co.beta) - np.asarray(co.alpha)) ** 2, axis=-1)
    v_tot = np.broadcast_to(v_tot, batch_shape)
    degenerate = ~(v_tot > 0)

    zeta = np.zeros(batch_shape)
    clipped = np.zeros(batch_shape, dtype=bool)
    eps = np.empty(batch_shape)
    expo = np.zeros(batch_shape)
    d2 = np.zeros(batch_shape)
    regime = np.zeros(batch_shape, dtype=int)

    ok = ~degenerate
    if np.any(ok):
        sub = _subset(co, ok, batch_shape)

        def fun_sub(z):
            k = _sum_last(kappa_from_coeffs(np.asarray(z)[..., None], sub))
            return (k.d1 + thr) / thr, k.d2 / thr

        root, clip = solve_increasing(fun_sub, lo_m[ok], hi_m[ok], x0=0.0, ftol=ftol)
        k = _sum_last(kappa_from_coeffs(root[..., None], sub))
        reg = regime_of(root)
        k1 = None
        high = reg == 1
        if np.any(high):
            sub1 = _subset(sub, high, root.shape)
            k1h = _sum_last(kappa_from_coeffs(np.ones(int(np.count_nonzero(high)))[..., None], sub1))
            k1 = CgfEval(*(np.zeros(root.shape) for _ in range(3)))
            for name in ("value", "d1", "d2"):
                getattr(k1, name)[high] = getattr(k1h, name)
        e, E = tail_expansion(n, root, k, thr, cgf_one=k1, regime=reg)
        zeta[ok], clipped[ok], eps[ok], expo[ok], d2[ok], regime[ok] = root, clip, e, E, k.d2, reg
    if np.any(degenerate):
        # S = -n_s sum I_s exactly, so the event probability is min(1, exp(T + S))
        s_det = -n * np.broadcast_to(np.sum(i_s, axis=-1), batch_shape)[degenerate]
        expo_d = lp.threshold + s_det
        eps[degenerate] = np.minimum(1.0, np.exp(np.minimum(expo_d, 0.0)))
        expo[degenerate] = expo_d
        low = expo_d >= 0
        zeta[degenerate] = np.where(low, -np.inf, np.inf)
        regime[degenerate] = np.where(low, 2, 1)
        clipped[degenerate] = True
    return {"epsilon": eps, "zeta": zeta, "regime": regime, "clipped": clipped,
            "exponent": expo, "d2": d2}


def _subset(co: BlockCoeffs, mask, batch_shape) -> BlockCoeffs:
    vals = []
    for name in ("alpha", "beta", "nu", "log_term", "quad"):
        a = np.asarray(getattr(co, name), dtype=float)
        a = np.broadcast_to(a, tuple(batch_shape) + a.shape[-1:]) if a.ndim else a
        vals.append(a.reshape(tuple(batch_shape) + a.shape[len(batch_shape):])[mask])
    return BlockCoeffs(*vals)


def saddlepoint_ns(blocks, lp: LinkParams) -> SaddlepointResult:
    """Conditional saddlepoint expansion w.r.t. ``n_s`` for one channel realization."""
    fs = _as_blocks(blocks)
    if fs.shape and len(fs.shape) > 1:
        raise ValueError("saddlepoint_ns expects a single list of blocks; use saddlepoint_ns_batch")
    out = saddlepoint_ns_batch(fs.reshape(1, -1), lp)
    return SaddlepointResult(
        epsilon=float(out["epsilon"][0]),
        zeta=float(out["zeta"][0]),
        regime=REGIMES[int(out["regime"][0])],
        clipped=bool(out["clipped"][0]),
        diagnostics={"exponent": float(out["exponent"][0]), "d2": float(out["d2"][0])},
    )


def conditional_epsilon(blocks, lp: LinkParams, method: str):
    """Conditional approximation for an array of realizations, shape ``(..., n_b)``."""
    if method == "normal_ns":
        return np.asarray(normal_ns(blocks, lp))
    if method == "saddlepoint_ns":
        return saddlepoint_ns_batch(blocks, lp)["epsilon"]
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS_NS}")


def average_over_channels(sampler, lp: LinkParams, n_draws: int, method: str, key: StreamKey,
                          chunk_size: int = 1 << 14, workers: int = 1):
    """Monte-Carlo mean and standard error of the conditional approximation.

    Each draw is a tuple of ``n_b`` i.i.d. fade samples.  ``sampler`` may be a
    :class:`FadeSample` (a point mass, repeated) or any object with a
    ``draw(n, key)`` method returning ``n`` i.i.d. fade samples.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    if isinstance(sampler, FadeSample):
        sampler = PointMass(sampler)

    def run(c, size):
        fs = sampler.draw(size * lp.n_b, key.child(c)).reshape(size, lp.n_b)
        return conditional_epsilon(fs, lp, method)

    eps = np.concatenate(map_chunks(run, chunk_sizes(n_draws, chunk_size), workers))
    if np.all(eps == eps[0]):
        return float(eps[0]), 0.0
    return math.fsum(eps) / n_draws, float(np.std(eps, ddof=1) / math.sqrt(n_draws))
