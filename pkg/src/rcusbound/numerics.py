"""Special functions, quadrature and the counter-based random streams.

Every Monte-Carlo loop in the package draws its randomness through
:class:`StreamKey`.  A key is a pair ``(seed, stream_id)`` that is fed
directly into the 128-bit key of a Philox counter-based generator, so that
two equal keys give identical streams and distinct stream ids give
independent ones.  Work is split into fixed-size chunks, chunk ``c`` using
``key.child(c)``; results therefore do not depend on the number of workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence, TypeVar

import numpy as np
from scipy import special

__all__ = [
    "StreamKey",
    "QuadRule",
    "q_function",
    "log_q_function",
    "q_inverse",
    "exp_q_scaled",
    "gauss_legendre",
    "gaussian_stream",
    "chunk_sizes",
    "map_chunks",
    "kahan_sum",
]

_U64 = (1 << 64) - 1
_SQRT2 = math.sqrt(2.0)

T = TypeVar("T")


@dataclass(frozen=True)
class StreamKey:
    """Identifies one reproducible random stream."""

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _U64 and 0 <= self.stream_id <= _U64):
            raise ValueError("seed and stream_id must be 64-bit unsigned integers")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=[self.seed, self.stream_id]))

    def child(self, index: int) -> "StreamKey":
        """Key of sub-stream ``index``; deterministic and collision-resistant."""
        ss = np.random.SeedSequence([self.seed, self.stream_id, int(index)])
        return StreamKey(self.seed, int(ss.generate_state(1, np.uint64)[0]))


@dataclass(frozen=True)
class QuadRule:
    nodes: np.ndarray
    weights: np.ndarray
    order: int

    def integrate(self, f: Callable[[np.ndarray], np.ndarray], a: float = -1.0, b: float = 1.0):
        """Integrate ``f`` over ``[a, b]`` with an affine map of the rule."""
        half = 0.5 * (b - a)
        x = half * self.nodes + 0.5 * (a + b)
        return half * np.tensordot(self.weights, f(x), axes=(0, 0))


def q_function(x):
    """Upper tail of the standard normal, ``Q(x) = P[N(0,1) > x]``."""
    return special.ndtr(-np.asarray(x, dtype=float)) if np.ndim(x) else float(special.ndtr(-float(x)))


def log_q_function(x):
    """``log Q(x)``, accurate far into the tail where ``Q`` underflows."""
    return special.log_ndtr(-np.asarray(x, dtype=float)) if np.ndim(x) else float(special.log_ndtr(-float(x)))


def q_inverse(p: float) -> float:
    """Inverse of :func:`q_function` for ``p`` in (0, 1)."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    return float(-special.ndtri(p))


def exp_q_scaled(a, x):
    """``exp(a) * Q(x)`` without overflow when ``a`` is close to ``x**2 / 2``.

    Uses ``exp(x**2/2) Q(x) = erfcx(x/sqrt(2)) / 2`` for ``x >= 0``.
    """
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    a, x = np.broadcast_arrays(a, x)
    out = np.empty(a.shape)
    pos = x >= 0
    xp = x[pos]
    with np.errstate(over="ignore"):
        out[pos] = np.exp(a[pos] - 0.5 * xp * xp) * (0.5 * special.erfcx(xp / _SQRT2))
        out[~pos] = np.exp(a[~pos]) * special.ndtr(-x[~pos])
    return float(out) if out.ndim == 0 else out


def gauss_legendre(order: int) -> QuadRule:
    """Gauss-Legendre rule on ``[-1, 1]``, exact up to degree ``2*order - 1``."""
    if not 1 <= int(order) <= 1024:
        raise ValueError(f"order must be in [1, 1024], got {order}")
    nodes, weights = np.polynomial.legendre.leggauss(int(order))
    return QuadRule(nodes=nodes, weights=weights, order=int(order))


def gaussian_stream(key: StreamKey, n: int) -> np.ndarray:
    """``n`` i.i.d. standard circularly-symmetric complex Gaussians, CN(0, 1)."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    z = key.generator().standard_normal((int(n), 2))
    return (z[:, 0] + 1j * z[:, 1]) / _SQRT2


def chunk_sizes(total: int, chunk: int) -> list[int]:
    """Split ``total`` draws into consecutive chunks of at most ``chunk``."""
    if total < 0 or chunk <= 0:
        raise ValueError("total must be >= 0 and chunk > 0")
    full, rest = divmod(int(total), int(chunk))
    return [int(chunk)] * full + ([rest] if rest else [])


def map_chunks(fn: Callable[[int, int], T], sizes: Sequence[int], workers: int = 1) -> list[T]:
    """Apply ``fn(chunk_index, size)`` to every chunk; output ordered by chunk index."""
    if workers <= 1 or len(sizes) <= 1:
        return [fn(i, n) for i, n in enumerate(sizes)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(len(sizes)), sizes))


def kahan_sum(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Compensated (Kahan) summation along ``axis``, vectorized over the rest."""
    values = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    total = np.zeros(values.shape[1:])
    comp = np.zeros(values.shape[1:])
    for v in values:
        y = v - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total
