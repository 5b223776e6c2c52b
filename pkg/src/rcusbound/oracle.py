"""Direct Monte-Carlo evaluation of the RCUs tail probability.

One trial draws ``n_b`` fade samples, ``n_s`` codeword symbols
``X ~ CN(0, rho)`` and noise samples per block, and one ``U ~ U[0, 1]``; it
is a hit when ``log U + sum_l sum_k i_s <= n_c n_b R``.

Two exact samplers of the same event are provided.  ``"direct"`` simulates
every symbol and sums the information densities with compensated summation.
``"gamma"`` uses that, per block, ``-i_s + log(1 + s rho |h_hat|^2)`` is the
Hermitian form ``u^H B u`` of ``u ~ CN(0, I_2)`` with
``B = s conj(a) a^T - t conj(b) b^T``, ``a = (sqrt(rho)(h - h_hat), sigma)``,
``b = (sqrt(rho) h, sigma)``, ``t = s / (1 + s rho |h_hat|^2)``.  Hence the
block sum over ``n_s`` symbols is ``mu_+ G_+ + mu_- G_- - n_s log(...)`` with
``mu_+-`` the eigenvalues of ``B`` and ``G_+-`` i.i.d. Gamma(``n_s``, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .channel_siso import PointMass
from .density import FadeSample, LinkParams, info_density
from .numerics import StreamKey, chunk_sizes, kahan_sum, map_chunks

__all__ = [
    "OracleResult",
    "wilson_interval",
    "rcus_estimate",
    "rcus_conditional_estimate",
    "block_eigenvalues",
]

ORACLE_CHUNK = 1 << 14


@dataclass(frozen=True)
class OracleResult:
    epsilon_hat: float
    n_trials: int
    hits: int
    wilson_ci: tuple[float, float]

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.wilson_ci[0] + self.wilson_ci[1])


def wilson_interval(hits: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n < 1:
        raise ValueError("n must be >= 1")
    z = float(stats.norm.ppf(0.5 + 0.5 * confidence))
    phat = hits / n
    denom = 1.0 + z * z / n
    centre = (phat + z * z / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    lo = 0.0 if hits == 0 else max(0.0, centre - half)
    hi = 1.0 if hits == n else min(1.0, centre + half)
    return (min(lo, phat), max(hi, phat))


def block_eigenvalues(fs: FadeSample, lp: LinkParams):
    """Eigenvalues ``(mu_+, mu_-)`` of the per-symbol Hermitian form of every block.

    Computed from the trace and determinant of ``B`` built from the vectors
    ``a`` and ``b``, independently of the closed-form CGF coefficients.
    """
    s, rho = lp.s, lp.rho
    h = np.asarray(fs.h, dtype=complex)
    hh = np.asarray(fs.h_hat, dtype=complex)
    sig = np.sqrt(np.asarray(fs.sigma2_block, dtype=float))
    t = s / (1.0 + s * rho * np.abs(hh) ** 2)
    a1, a2 = math.sqrt(rho) * (h - hh), sig
    b1, b2 = math.sqrt(rho) * h, sig
    tr = s * (np.abs(a1) ** 2 + a2 ** 2) - t * (np.abs(b1) ** 2 + b2 ** 2)
    det = -s * t * np.abs(a1 * b2 - a2 * b1) ** 2
    disc = np.sqrt(0.25 * tr * tr - det)
    big = np.where(tr >= 0, 0.5 * tr + disc, 0.5 * tr - disc)
    with np.errstate(divide="ignore", invalid="ignore"):
        small = np.where(big != 0, det / big, 0.0)
    mu_p = np.where(tr >= 0, big, small)
    mu_m = np.where(tr >= 0, small, big)
    return mu_p, mu_m


def _neg_density_sum_gamma(fs: FadeSample, lp: LinkParams, rng: np.random.Generator):
    """``-sum_k i_s`` of every block in ``fs`` (any shape), via the Gamma reduction."""
    mu_p, mu_m = block_eigenvalues(fs, lp)
    g = rng.standard_gamma(lp.n_s, size=(2,) + mu_p.shape)
    log_term = np.log1p(lp.s * lp.rho * np.abs(np.asarray(fs.h_hat)) ** 2)
    return mu_p * g[0] + mu_m * g[1] - lp.n_s * log_term


def _density_direct(fs: FadeSample, lp: LinkParams, rng: np.random.Generator):
    """Symbol-level information densities, shape ``fs.shape + (n_s,)``."""
    shape = fs.shape + (lp.n_s,)
    z = rng.standard_normal((4,) + shape) * math.sqrt(0.5)
    x = math.sqrt(lp.rho) * (z[0] + 1j * z[1])
    w = np.sqrt(np.asarray(fs.sigma2_block, dtype=float))[..., None] * (z[2] + 1j * z[3])
    h = np.asarray(fs.h)[..., None]
    hh = np.asarray(fs.h_hat)[..., None]
    return info_density(x, h * x + w, hh, lp)


def _count_hits(fs: FadeSample, lp: LinkParams, rng: np.random.Generator, method: str) -> int:
    """``fs`` has shape ``(trials, n_b)``."""
    if method == "gamma":
        total = -np.sum(_neg_density_sum_gamma(fs, lp, rng), axis=-1)
    elif method == "direct":
        dens = _density_direct(fs, lp, rng)
        total = kahan_sum(dens.reshape(dens.shape[0], -1), axis=-1)
    else:
        raise ValueError(f"unknown oracle method {method!r}")
    log_u = np.log(rng.random(fs.shape[0]))
    return int(np.count_nonzero(log_u + total <= lp.threshold))


def _run(draw_blocks, lp: LinkParams, n_trials: int, key: StreamKey, method: str,
         chunk_size: int | None, workers: int) -> OracleResult:
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if chunk_size is None:
        # the direct path holds 4 n_b n_s normals per trial in memory
        chunk_size = ORACLE_CHUNK if method == "gamma" else max(1, (1 << 20) // (lp.n_b * lp.n_s))

    def run(c, size):
        ck = key.child(c)
        # fading and symbol randomness come from separate sub-streams
        fs = draw_blocks(size, ck.child(0))
        return _count_hits(fs, lp, ck.child(1).generator(), method)

    hits = sum(map_chunks(run, chunk_sizes(n_trials, chunk_size), workers))
    return OracleResult(hits / n_trials, int(n_trials), int(hits), wilson_interval(hits, n_trials))


def rcus_estimate(sampler, lp: LinkParams, n_trials: int, key: StreamKey, *, method: str = "gamma",
                  chunk_size: int | None = None, workers: int = 1) -> OracleResult:
    """Hit fraction of the RCUs event with fading drawn from ``sampler``."""
    if isinstance(sampler, FadeSample):
        sampler = PointMass(sampler)

    def draw_blocks(size, k):
        return sampler.draw(size * lp.n_b, k).reshape(size, lp.n_b)

    return _run(draw_blocks, lp, n_trials, key, method, chunk_size, workers)


def rcus_conditional_estimate(blocks, lp: LinkParams, n_trials: int, key: StreamKey, *,
                              method: str = "gamma", chunk_size: int | None = None,
                              workers: int = 1) -> OracleResult:
    """As :func:`rcus_estimate` with the ``n_b`` blocks held fixed."""
    if not isinstance(blocks, FadeSample):
        blocks = list(blocks)
        blocks = FadeSample(np.array([b.h for b in blocks], dtype=complex),
                            np.array([b.h_hat for b in blocks], dtype=complex),
                            np.array([b.sigma2_block for b in blocks], dtype=float))
    fixed = blocks.reshape(-1)
    if fixed.shape[0] != lp.n_b:
        raise ValueError(f"expected {lp.n_b} blocks, got {fixed.shape[0]}")
    b = np.broadcast_arrays(np.asarray(fixed.h), np.asarray(fixed.h_hat), np.asarray(fixed.sigma2_block, dtype=float))

    def draw_blocks(size, k):
        return FadeSample(*(np.broadcast_to(a, (size, lp.n_b)) for a in b))

    return _run(draw_blocks, lp, n_trials, key, method, chunk_size, workers)
