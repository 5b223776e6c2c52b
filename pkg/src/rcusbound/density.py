"""Closed-form per-block quantities of the generalized information density.

For one fading block with channel ``h``, estimate ``h_hat`` and noise
variance ``sigma2`` the information density of a single data symbol is

    i_s(x; y, h_hat) = -s|y - h_hat x|^2 + s|y|^2 / (1 + s rho |h_hat|^2)
                       + log(1 + s rho |h_hat|^2),

with ``x ~ CN(0, rho)`` and ``y = h x + w``, ``w ~ CN(0, sigma2)``.  Its
negative is a Hermitian quadratic form of a Gaussian vector minus a
constant, which gives the moment generating function

    g(zeta) = E[exp(-zeta i_s)] = (1 + (beta - alpha) zeta - c zeta^2)^{-1}
                                   (1 + s rho |h_hat|^2)^{-zeta},

with ``c = alpha beta (1 - nu) = s^2 rho sigma2 |h_hat|^2 / (1 + s rho |h_hat|^2)``.
All functions broadcast over array-valued :class:`FadeSample` fields.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LinkParams",
    "FadeSample",
    "BlockCoeffs",
    "RocInterval",
    "CgfEval",
    "RocError",
    "bits_to_nats",
    "nats_to_bits",
    "block_coeffs",
    "info_density",
    "mean_variance",
    "roc_interval",
    "g_mgf",
    "g_derivatives",
    "kappa_block",
]

LN2 = math.log(2.0)


def bits_to_nats(rate_bits: float) -> float:
    return rate_bits * LN2


def nats_to_bits(rate_nats: float) -> float:
    return rate_nats / LN2


class RocError(ValueError):
    """Raised when a CGF is evaluated outside its region of convergence."""

    def __init__(self, message: str, violations: int = 1):
        super().__init__(message)
        self.violations = int(violations)


@dataclass(frozen=True)
class LinkParams:
    """Deterministic link constants.  ``rate`` is in nats per channel use."""

    rho: float
    s: float
    n_p: int
    n_s: int
    n_b: int
    rate: float
    sigma2: float = 1.0

    def __post_init__(self):
        if not (self.rho > 0 and self.s > 0 and self.sigma2 > 0 and self.rate > 0):
            raise ValueError(f"rho, s, sigma2 and rate must be positive: {self}")
        if self.n_p < 1 or self.n_s < 1 or self.n_b < 1:
            raise ValueError(f"n_p, n_s and n_b must be >= 1: {self}")

    @property
    def n_c(self) -> int:
        return self.n_p + self.n_s

    @property
    def threshold(self) -> float:
        """Total information threshold ``n_c n_b R`` of the error event."""
        return self.n_c * self.n_b * self.rate

    @classmethod
    def from_blocklength(cls, blocklength: int, n_b: int, n_p: int, *, rho: float, s: float,
                         rate: float, sigma2: float = 1.0) -> "LinkParams":
        """Split ``blocklength = n_b n_c`` symbols into ``n_b`` blocks with ``n_p`` pilots each."""
        n_c, rem = divmod(int(blocklength), int(n_b))
        if rem:
            raise ValueError(f"n_b={n_b} does not divide the blocklength {blocklength}")
        return cls(rho=rho, s=s, n_p=n_p, n_s=n_c - n_p, n_b=n_b, rate=rate, sigma2=sigma2)


@dataclass(frozen=True)
class FadeSample:
    """Channel, estimate and noise variance of one block (or an array of blocks)."""

    h: complex | np.ndarray
    h_hat: complex | np.ndarray
    sigma2_block: float | np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return np.broadcast(self.h, self.h_hat, self.sigma2_block).shape

    def __getitem__(self, idx) -> "FadeSample":
        b = np.broadcast_arrays(np.asarray(self.h), np.asarray(self.h_hat),
                                np.asarray(self.sigma2_block, dtype=float))
        return FadeSample(b[0][idx], b[1][idx], b[2][idx])

    def reshape(self, *shape) -> "FadeSample":
        b = np.broadcast_arrays(np.asarray(self.h), np.asarray(self.h_hat),
                                np.asarray(self.sigma2_block, dtype=float))
        return FadeSample(*(a.reshape(*shape) for a in b))

    @staticmethod
    def concatenate(parts: list["FadeSample"]) -> "FadeSample":
        b = [np.broadcast_arrays(np.asarray(p.h), np.asarray(p.h_hat),
                                 np.asarray(p.sigma2_block, dtype=float)) for p in parts]
        return FadeSample(*(np.concatenate([x[i] for x in b]) for i in range(3)))


@dataclass(frozen=True)
class BlockCoeffs:
    alpha: float | np.ndarray
    beta: float | np.ndarray
    nu: float | np.ndarray
    log_term: float | np.ndarray
    # alpha * beta * (1 - nu), kept separately because it is computed without cancellation
    quad: float | np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True)
class RocInterval:
    """Open interval of convergence; unbounded sides are ``-inf`` / ``+inf``."""

    zeta_lo: float | np.ndarray
    zeta_hi: float | np.ndarray

    def contains(self, zeta):
        return (zeta > self.zeta_lo) & (zeta < self.zeta_hi)


@dataclass(frozen=True)
class CgfEval:
    value: float | np.ndarray
    d1: float | np.ndarray
    d2: float | np.ndarray

    def __add__(self, other: "CgfEval") -> "CgfEval":
        return CgfEval(self.value + other.value, self.d1 + other.d1, self.d2 + other.d2)

    def scale(self, k: float) -> "CgfEval":
        return CgfEval(k * self.value, k * self.d1, k * self.d2)


def _scalarize(x):
    return float(x) if np.ndim(x) == 0 else x


def block_coeffs(fs: FadeSample, lp: LinkParams) -> BlockCoeffs:
    """alpha, beta, nu and log(1 + s rho |h_hat|^2) of each block."""
    s, rho = lp.s, lp.rho
    h = np.asarray(fs.h, dtype=complex)
    hh = np.asarray(fs.h_hat, dtype=complex)
    sig2 = np.asarray(fs.sigma2_block, dtype=float)
    abs_hh2 = hh.real ** 2 + hh.imag ** 2
    snr_hat = s * rho * abs_hh2
    denom = 1.0 + snr_hat
    alpha = s * (rho * np.abs(h - hh) ** 2 + sig2)
    beta = s * (rho * np.abs(h) ** 2 + sig2) / denom
    # Lagrange identity: |a|^2|b|^2 - |a^H b|^2 = rho sigma2 |h_hat|^2
    quad = s * s * rho * sig2 * abs_hh2 / denom
    with np.errstate(divide="ignore", invalid="ignore"):
        nu = np.where(quad > 0, 1.0 - quad / (alpha * beta), 1.0)
    nu = np.clip(nu, 0.0, 1.0)
    log_term = np.log1p(snr_hat)
    if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(beta)) and np.all(np.isfinite(log_term))):
        raise FloatingPointError("non-finite block coefficients (degenerate fade sample)")
    return BlockCoeffs(*(_scalarize(v) for v in (alpha, beta, nu, log_term, quad)))


def info_density(x, y, h_hat, lp: LinkParams):
    """Generalized information density of one symbol (vectorized)."""
    s, rho = lp.s, lp.rho
    abs_hh2 = np.abs(h_hat) ** 2
    denom = 1.0 + s * rho * abs_hh2
    out = -s * np.abs(y - h_hat * x) ** 2 + s * np.abs(y) ** 2 / denom + np.log1p(s * rho * abs_hh2)
    return _scalarize(out)


def mean_variance(fs: FadeSample, lp: LinkParams):
    """Conditional mean ``I_s`` and variance ``V_s`` of the information density."""
    co = block_coeffs(fs, lp)
    diff = np.asarray(co.beta) - np.asarray(co.alpha)
    i_s = np.asarray(co.log_term) + diff
    v_s = diff * diff + 2.0 * np.asarray(co.quad)
    return _scalarize(i_s), _scalarize(v_s)


def _roc_from_coeffs(co: BlockCoeffs):
    b = np.asarray(co.beta, dtype=float) - np.asarray(co.alpha, dtype=float)
    c = np.asarray(co.quad, dtype=float)
    b, c = np.broadcast_arrays(b, c)
    lo = np.full(b.shape, -np.inf)
    hi = np.full(b.shape, np.inf)
    quadratic = c > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(b * b + 4.0 * c)
        # roots of c z^2 - b z - 1 = 0, each written in its cancellation-free form
        pos_b = b >= 0
        hi_q = np.where(pos_b, (b + sq) / (2.0 * c), 2.0 / (sq - b))
        lo_q = np.where(pos_b, -2.0 / (sq + b), (b - sq) / (2.0 * c))
        lo = np.where(quadratic, lo_q, np.where(b > 0, -1.0 / b, lo))
        hi = np.where(quadratic, hi_q, np.where(b < 0, -1.0 / b, hi))
    return lo, hi


def roc_interval(fs: FadeSample, lp: LinkParams) -> RocInterval:
    """Interval on which ``1 + (beta-alpha) zeta - alpha beta (1-nu) zeta^2 > 0``."""
    lo, hi = _roc_from_coeffs(block_coeffs(fs, lp))
    return RocInterval(_scalarize(lo), _scalarize(hi))


def _denominator(zeta, co: BlockCoeffs):
    b = np.asarray(co.beta) - np.asarray(co.alpha)
    c = np.asarray(co.quad)
    return 1.0 + b * zeta - c * zeta * zeta, b - 2.0 * c * zeta, c


def _check_roc(q):
    bad = ~(q > 0)
    if np.any(bad):
        n = int(np.count_nonzero(bad))
        raise RocError(f"zeta outside the region of convergence for {n} block(s)", n)


def kappa_from_coeffs(zeta, co: BlockCoeffs) -> CgfEval:
    """kappa, kappa', kappa'' of every block at ``zeta`` (broadcasting)."""
    q, dq, c = _denominator(zeta, co)
    _check_roc(q)
    r = dq / q
    value = -zeta * np.asarray(co.log_term) - np.log(q)
    d1 = -np.asarray(co.log_term) - r
    d2 = r * r + 2.0 * c / q
    return CgfEval(_scalarize(value), _scalarize(d1), _scalarize(d2))


def kappa_block(zeta, fs: FadeSample, lp: LinkParams) -> CgfEval:
    """Per-block CGF of ``-i_s`` and its first two derivatives."""
    return kappa_from_coeffs(zeta, block_coeffs(fs, lp))


def g_mgf(zeta, fs: FadeSample, lp: LinkParams):
    """Per-block MGF ``E[exp(-zeta i_s)]`` of one data symbol."""
    co = block_coeffs(fs, lp)
    q, _, _ = _denominator(zeta, co)
    _check_roc(q)
    return _scalarize(np.exp(-zeta * np.asarray(co.log_term)) / q)


def g_derivatives(zeta, fs: FadeSample, lp: LinkParams):
    """``(g, g', g'')`` from ``g' = g kappa'`` and ``g'' = g (kappa'' + kappa'^2)``."""
    k = kappa_block(zeta, fs, lp)
    g = np.exp(k.value)
    return _scalarize(g), _scalarize(g * k.d1), _scalarize(g * (k.d2 + k.d1 ** 2))
