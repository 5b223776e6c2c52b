"""SISO Rayleigh block fading with pilot-based ML channel estimation.

A sampler is any object with ``draw(n, key) -> FadeSample`` (``n`` i.i.d.
blocks, a 1-D sample) and an integer attribute ``reals_per_block`` giving the
number of real Gaussian scalars consumed per block.  Samplers draw their base
normals from the key alone and scale them afterwards, so changing ``rho``,
``n_p`` or ``s`` with the same key gives common random numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .density import FadeSample, LinkParams
from .numerics import StreamKey, chunk_sizes, map_chunks

__all__ = [
    "SisoRayleigh",
    "PointMass",
    "siso_sampler",
    "draw_chunked",
    "DEFAULT_CHUNK",
]

DEFAULT_CHUNK = 1 << 16


@dataclass(frozen=True)
class SisoRayleigh:
    """``h ~ CN(0, 1)``, ``h_hat = h + z`` with ``z ~ CN(0, sigma2 / (rho n_p))``.

    The pilot observation is not simulated: ``x_p^H w / (rho n_p)`` is a
    sufficient statistic with exactly the law of ``z`` for any pilot
    sequence with ``|x_p|^2 = rho n_p``.
    """

    rho: float
    n_p: int
    sigma2: float = 1.0

    reals_per_block = 4

    def __post_init__(self):
        if not (self.rho > 0 and self.sigma2 > 0 and self.n_p >= 1):
            raise ValueError(f"invalid SISO sampler parameters: {self}")

    @classmethod
    def from_link(cls, lp: LinkParams) -> "SisoRayleigh":
        return cls(rho=lp.rho, n_p=lp.n_p, sigma2=lp.sigma2)

    @property
    def estimation_error_variance(self) -> float:
        return self.sigma2 / (self.rho * self.n_p)

    def draw(self, n: int, key: StreamKey) -> FadeSample:
        z = key.generator().standard_normal((int(n), 4)) * math.sqrt(0.5)
        h = z[:, 0] + 1j * z[:, 1]
        err = (z[:, 2] + 1j * z[:, 3]) * math.sqrt(self.estimation_error_variance)
        return FadeSample(h, h + err, np.full(int(n), float(self.sigma2)))


@dataclass(frozen=True)
class PointMass:
    """Degenerate sampler that always emits the same block."""

    block: FadeSample

    reals_per_block = 0

    def draw(self, n: int, key: StreamKey | None = None) -> FadeSample:
        b = self.block
        return FadeSample(np.full(int(n), complex(b.h)), np.full(int(n), complex(b.h_hat)),
                          np.full(int(n), float(b.sigma2_block)))


def siso_sampler(lp: LinkParams, key: StreamKey, chunk_size: int = DEFAULT_CHUNK):
    """Endless generator of SISO fade samples, chunk ``c`` drawn from ``key.child(c)``."""
    sampler = SisoRayleigh.from_link(lp)
    c = 0
    while True:
        fs = sampler.draw(chunk_size, key.child(c))
        for i in range(chunk_size):
            yield fs[i]
        c += 1


def draw_chunked(sampler, n: int, key: StreamKey, chunk_size: int = DEFAULT_CHUNK,
                 workers: int = 1) -> FadeSample:
    """``n`` blocks drawn in fixed chunks; chunk ``c`` uses ``key.child(c)``.

    The result depends on ``(key, n, chunk_size)`` only, never on ``workers``.
    A bare :class:`FadeSample` is treated as a point mass.
    """
    if isinstance(sampler, FadeSample):
        sampler = PointMass(sampler)
    if n < 1:
        raise ValueError("n must be >= 1")
    parts = map_chunks(lambda c, size: sampler.draw(size, key.child(c)),
                       chunk_sizes(n, chunk_size), workers)
    return parts[0] if len(parts) == 1 else FadeSample.concatenate(parts)
