"""Multicell massive-MIMO uplink reduced to scalar effective fade samples.

Powers are normalized by the receiver noise power, so the noise variance is
1, the large-scale gains are ``10**((pathloss_dB - noise_dBm) / 10)`` and
the transmit power ``rho`` is expressed in mW (its dB value is in dBm).

Per fading block the serving BS ``j`` observes the pilots of all ``L K``
users, forms MMSE estimates ``h_hat = R Q (Y_p conj(x_p))`` and the
multicell-MMSE combiner ``v = (sum h_hat h_hat^H + Z)^{-1} h_hat_{j,k}``.
The link of user ``(j, k)`` after combining is the scalar block-fading
channel ``(v^H h, v^H h_hat, sigma_l^2)`` consumed by the bound machinery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import linalg

from .density import FadeSample
from .numerics import QuadRule, StreamKey, gauss_legendre

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

__all__ = [
    "NetworkConfig",
    "CorrMatrix",
    "pathloss_db",
    "local_scattering_corr",
    "orthogonal_pilots",
    "mmse_estimate",
    "mmse_combiner",
    "MimoNetwork",
    "EffectiveChannelSampler",
    "effective_channel_sampler",
    "load_scenario",
    "network_config_from_table",
]

PANEL_ORDER = 20
PANEL_SPACING = 4


@dataclass(frozen=True)
class NetworkConfig:
    """Geometry and propagation constants of the network.

    ``user_angles_deg`` gives the azimuth of each user around its own BS,
    one list per cell (or a single list reused by every cell); by default
    the ``K`` users are regularly spaced on the circle.
    """

    n_cells: int = 1
    users_per_cell: int = 1
    antennas: int = 100
    cell_side: float = 75.0
    user_radius: float = 36.4
    user_angles_deg: tuple | None = None
    angular_spread_deg: float = 25.0
    pathloss_offset_db: float = -35.3
    pathloss_slope: float = 37.6
    noise_power_dbm: float = -94.0
    wraparound: bool = False
    n_p: int | None = None
    orthogonal_pilots: bool = True
    combiner_z: str = "estimate"

    def __post_init__(self):
        if self.n_cells < 1 or self.users_per_cell < 1 or self.antennas < 1:
            raise ValueError("n_cells, users_per_cell and antennas must be >= 1")
        if not 0.0 < math.radians(self.angular_spread_deg) < math.pi / 2:
            raise ValueError("angular spread must lie in (0, 90) degrees")
        if self.user_radius <= 0 or self.cell_side <= 0:
            raise ValueError("user_radius and cell_side must be positive")
        if self.orthogonal_pilots and self.n_p is not None and self.n_p != self.n_users:
            raise ValueError(f"orthogonal pilots need n_p = L K = {self.n_users}, got {self.n_p}")
        if self.combiner_z not in ("estimate", "error"):
            raise ValueError("combiner_z must be 'estimate' or 'error'")

    @property
    def n_users(self) -> int:
        return self.n_cells * self.users_per_cell

    @property
    def pilot_length(self) -> int:
        return self.n_users if self.n_p is None else int(self.n_p)

    @property
    def delta(self) -> float:
        return math.radians(self.angular_spread_deg)

    def user_angles(self) -> np.ndarray:
        """Azimuths (radians) of the users around their own BS, shape ``(L, K)``."""
        L, K = self.n_cells, self.users_per_cell
        if self.user_angles_deg is None:
            return np.tile(2 * np.pi * np.arange(K) / K, (L, 1))
        a = np.radians(np.asarray(self.user_angles_deg, dtype=float))
        if a.ndim == 1:
            a = np.tile(a, (L, 1))
        if a.shape != (L, K):
            raise ValueError(f"user_angles_deg must have shape ({K},) or ({L}, {K})")
        return a


@dataclass(frozen=True)
class CorrMatrix:
    entries: np.ndarray
    beta: float

    @cached_property
    def sqrt(self) -> np.ndarray:
        """``A`` with ``A A^H = R`` from the eigendecomposition, eigenvalues floored at 0."""
        w, u = np.linalg.eigh(self.entries)
        return u * np.sqrt(np.maximum(w, 0.0))


def pathloss_db(d: float, offset_db: float = -35.3, slope: float = 37.6) -> float:
    """Large-scale gain in dB at distance ``d`` metres."""
    if not d > 0:
        raise ValueError("distance must be positive")
    return offset_db - slope * math.log10(d)


def _lag_integral(d: int, phi: float, delta: float, rule: QuadRule) -> complex:
    """``(1/2 delta) int_{-delta}^{delta} exp(j pi d sin(phi + t)) dt`` by panels."""
    if d == 0:
        return 1.0 + 0.0j
    panels = max(1, math.ceil(abs(d) / PANEL_SPACING))
    edges = np.linspace(-delta, delta, panels + 1)
    total = 0.0 + 0.0j
    for a, b in zip(edges[:-1], edges[1:]):
        total += complex(rule.integrate(lambda t: np.exp(1j * np.pi * d * np.sin(phi + t)), a, b))
    return total / (2.0 * delta)


def local_scattering_corr(beta: float, phi: float, delta: float, M: int,
                          rule: QuadRule | None = None) -> CorrMatrix:
    """Spatial correlation of a half-wavelength ULA with uniform angular spread.

    The matrix is Toeplitz in ``m1 - m2``; each lag is integrated with
    ``max(1, ceil(|lag| / 4))`` Gauss-Legendre panels and the diagonal is
    set to ``beta`` exactly.
    """
    rule = gauss_legendre(PANEL_ORDER) if rule is None else rule
    col = np.array([_lag_integral(d, phi, delta, rule) for d in range(M)]) * beta
    col[0] = beta
    R = linalg.toeplitz(col, np.conj(col))
    return CorrMatrix(0.5 * (R + R.conj().T), float(beta))


def orthogonal_pilots(L: int, K: int, n_p: int, rho: float) -> np.ndarray:
    """DFT pilot book, shape ``(n_p, L K)``; column ``i K + k`` is user ``k`` of cell ``i``."""
    if n_p != L * K:
        raise ValueError(f"orthogonal pilots need n_p = L K = {L * K}, got {n_p}")
    idx = np.arange(n_p)
    return math.sqrt(rho) * np.exp(-2j * np.pi * np.outer(idx, idx) / n_p)


def _q_matrices(R_list, pilots: np.ndarray, sigma2: float):
    """``Q_u = (sum_u' R_u' x_u'^H x_u + sigma2 I)^{-1}`` as LU factors, one per user."""
    gram = pilots.conj().T @ pilots
    M = R_list[0].shape[0]
    out = []
    for u in range(len(R_list)):
        A = sum(R_list[v] * gram[v, u] for v in range(len(R_list))) + sigma2 * np.eye(M)
        out.append(linalg.lu_factor(A))
    return out


def mmse_estimate(Y_pilot: np.ndarray, R_list, pilots: np.ndarray, sigma2: float = 1.0) -> np.ndarray:
    """MMSE estimates of all users' channels at one BS, shape ``(M, L K)``.

    ``Y_pilot`` is ``M x n_p``; ``R_list[u]`` the correlation of user ``u``
    at this BS.  Raises ``numpy.linalg.LinAlgError`` (via scipy) if a ``Q``
    matrix is singular.
    """
    R_list = [np.asarray(getattr(R, "entries", R)) for R in R_list]
    qf = _q_matrices(R_list, pilots, sigma2)
    cols = []
    for u, R in enumerate(R_list):
        cols.append(R @ linalg.lu_solve(qf[u], Y_pilot @ pilots[:, u].conj()))
    return np.stack(cols, axis=1)


def mmse_combiner(H_hat: np.ndarray, Z: np.ndarray, k: int) -> np.ndarray:
    """``(H_hat H_hat^H + Z)^{-1} h_hat_k`` via a Cholesky solve."""
    A = H_hat @ H_hat.conj().T + Z
    try:
        cf = linalg.cho_factor(A, lower=True)
    except linalg.LinAlgError as exc:
        raise linalg.LinAlgError(f"combiner matrix not positive definite (user {k})") from exc
    return linalg.cho_solve(cf, H_hat[:, k])


def _wrapped_offset(user_xy: np.ndarray, bs_xy: np.ndarray, period: np.ndarray | None) -> np.ndarray:
    """Vector from the BS to the nearest of the 3 x 3 translated copies of the user."""
    d = user_xy - bs_xy
    if period is None:
        return d
    shifts = np.array([(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)], dtype=float) * period
    cand = d + shifts
    return cand[np.argmin(np.hypot(cand[:, 0], cand[:, 1]))]


class MimoNetwork:
    """Layout, large-scale gains and correlation matrices of a :class:`NetworkConfig`."""

    def __init__(self, config: NetworkConfig, rule: QuadRule | None = None):
        self.config = config
        self.rule = gauss_legendre(PANEL_ORDER) if rule is None else rule
        L = config.n_cells
        nx = math.ceil(math.sqrt(L))
        ny = math.ceil(L / nx)
        side = config.cell_side
        self.bs_xy = np.array([((i % nx + 0.5) * side, (i // nx + 0.5) * side) for i in range(L)])
        self.period = np.array([nx * side, ny * side]) if config.wraparound else None
        ang = config.user_angles()
        self.user_xy = np.array([[self.bs_xy[i] + config.user_radius * np.array([math.cos(a), math.sin(a)])
                                  for a in ang[i]] for i in range(L)])
        self._corr: dict[tuple[int, int], list[CorrMatrix]] = {}

    def offset(self, cell: int, user: int, bs: int) -> np.ndarray:
        return _wrapped_offset(self.user_xy[cell, user], self.bs_xy[bs], self.period)

    def distance(self, cell: int, user: int, bs: int) -> float:
        return float(np.hypot(*self.offset(cell, user, bs)))

    def gain(self, cell: int, user: int, bs: int) -> float:
        """Large-scale gain normalized by the noise power (linear)."""
        c = self.config
        pl = pathloss_db(self.distance(cell, user, bs), c.pathloss_offset_db, c.pathloss_slope)
        return 10.0 ** ((pl - c.noise_power_dbm) / 10.0)

    def nominal_angle(self, cell: int, user: int, bs: int) -> float:
        dx, dy = self.offset(cell, user, bs)
        return math.atan2(dy, dx)

    def correlations(self, bs: int) -> list[CorrMatrix]:
        """Correlation matrices of all ``L K`` users at BS ``bs``, in pilot-column order."""
        if bs not in self._corr:
            c = self.config
            self._corr[bs] = [
                local_scattering_corr(self.gain(i, k, bs), self.nominal_angle(i, k, bs), c.delta,
                                      c.antennas, self.rule)
                for i in range(c.n_cells) for k in range(c.users_per_cell)
            ]
        return self._corr[bs]


@dataclass
class EffectiveChannelSampler:
    """Effective scalar fade samples of user ``k`` in cell ``j``.

    Draws consume ``2 M L K`` real normals for the channels and ``2 M n_p``
    for the pilot noise per block; channels and noise are scaled after
    drawing, so the same key gives common random numbers across ``rho``.

    Draws are memoized per ``(n, key)`` up to ``cache_blocks`` blocks in
    total, since the per-block linear algebra dominates and optimizers over
    ``s`` revisit the same draws. Cached arrays are read-only.
    """

    network: MimoNetwork
    cell: int
    user: int
    rho: float
    batch: int = 512
    cache_blocks: int = 2_000_000
    _pre: dict = field(default=None, init=False, repr=False)
    _memo: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        c = self.network.config
        if not (0 <= self.cell < c.n_cells and 0 <= self.user < c.users_per_cell):
            raise ValueError("serving cell or user index out of range")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        self._pre = self._precompute()

    @property
    def reals_per_block(self) -> int:
        c = self.network.config
        return 2 * c.antennas * (c.n_users + c.pilot_length)

    def with_rho(self, rho: float) -> "EffectiveChannelSampler":
        return EffectiveChannelSampler(self.network, self.cell, self.user, rho, self.batch, self.cache_blocks)

    def _precompute(self) -> dict:
        c = self.network.config
        corr = self.network.correlations(self.cell)
        R = [cm.entries for cm in corr]
        n_p = c.pilot_length
        if c.orthogonal_pilots:
            X = orthogonal_pilots(c.n_cells, c.users_per_cell, n_p, self.rho)
        else:
            # every user reuses one pilot sequence
            X = np.tile(orthogonal_pilots(1, 1, 1, self.rho) * np.ones((n_p, 1)), (1, c.n_users))
        qf = _q_matrices(R, X, 1.0)
        # estimator matrices R_u Q_u, applied to Y_p conj(x_u)
        est = [R[u] @ linalg.lu_solve(qf[u], np.eye(c.antennas)) for u in range(c.n_users)]
        norms = np.sum(np.abs(X) ** 2, axis=0)
        est_cov = [norms[u] * est[u] @ R[u] for u in range(c.n_users)]
        if c.combiner_z == "estimate":
            Z = sum(est_cov)
        else:
            Z = sum(R[u] - est_cov[u] for u in range(c.n_users))
        Z = 0.5 * (Z + Z.conj().T) + np.eye(c.antennas) / self.rho
        return {
            "sqrt": [cm.sqrt for cm in corr],
            "pilots": X,
            "est": est,
            "Z_chol": linalg.cho_factor(Z, lower=True),
            "Z": Z,
            "target": self.cell * c.users_per_cell + self.user,
        }

    def _effective(self, z_h: np.ndarray, z_w: np.ndarray) -> FadeSample:
        c = self.network.config
        pre = self._pre
        M, U = c.antennas, c.n_users
        B = z_h.shape[0]
        # channels h[b, m, u] and pilot observation Y = H X^T + W
        H = np.stack([z_h[:, u, :] @ pre["sqrt"][u].T for u in range(U)], axis=2)
        Y = H @ pre["pilots"].T + z_w
        H_hat = np.stack([(Y @ pre["pilots"][:, u].conj()) @ pre["est"][u].T for u in range(U)], axis=2)
        # Woodbury: (Z + Hh Hh^H)^{-1} hh_k = Z^{-1}(hh_k - Hh c), (I + Hh^H Z^{-1} Hh) c = Hh^H Z^{-1} hh_k
        L_z = pre["Z_chol"][0]
        flat = np.moveaxis(H_hat, 1, 0).reshape(M, B * U)
        A = linalg.solve_triangular(L_z, flat, lower=True).reshape(M, B, U).transpose(1, 0, 2)
        G = np.conj(np.swapaxes(A, 1, 2)) @ A
        t = pre["target"]
        coef = np.linalg.solve(np.eye(U) + G, G[:, :, t][..., None])[..., 0]
        r = A[:, :, t] - np.einsum("bmu,bu->bm", A, coef)
        v = linalg.solve_triangular(L_z, r.T, lower=True, trans="C").T
        proj = np.einsum("bm,bmu->bu", v.conj(), H)
        h_eff = proj[:, t]
        hh_eff = np.einsum("bm,bm->b", v.conj(), H_hat[:, :, t])
        interf = np.sum(np.abs(proj) ** 2, axis=1) - np.abs(h_eff) ** 2
        sig2 = np.sum(np.abs(v) ** 2, axis=1) + self.rho * np.maximum(interf, 0.0)
        return FadeSample(h_eff, hh_eff, sig2)

    def draw(self, n: int, key: StreamKey) -> FadeSample:
        tag = (int(n), key)
        if tag in self._memo:
            return self._memo[tag]
        fs = self._draw(n, key)
        if n <= self.cache_blocks:
            while self._memo and sum(k[0] for k in self._memo) + n > self.cache_blocks:
                self._memo.pop(next(iter(self._memo)))
            for a in (fs.h, fs.h_hat, fs.sigma2_block):
                a.setflags(write=False)
            self._memo[tag] = fs
        return fs

    def _draw(self, n: int, key: StreamKey) -> FadeSample:
        c = self.network.config
        M, U, n_p = c.antennas, c.n_users, c.pilot_length
        rng = key.generator()
        parts = []
        remaining = int(n)
        while remaining > 0:
            b = min(self.batch, remaining)
            z = rng.standard_normal((b, 2 * M * (U + n_p))) * math.sqrt(0.5)
            zc = z[:, 0::2] + 1j * z[:, 1::2]
            z_h = zc[:, : M * U].reshape(b, U, M)
            z_w = zc[:, M * U:].reshape(b, M, n_p)
            parts.append(self._effective(z_h, z_w))
            remaining -= b
        return parts[0] if len(parts) == 1 else FadeSample.concatenate(parts)

    def combiners(self, n: int, key: StreamKey):
        """Channels, estimates and combiners of ``n`` blocks (diagnostic path, direct Cholesky)."""
        c = self.network.config
        M, U, n_p = c.antennas, c.n_users, c.pilot_length
        z = key.generator().standard_normal((n, 2 * M * (U + n_p))) * math.sqrt(0.5)
        zc = z[:, 0::2] + 1j * z[:, 1::2]
        pre = self._pre
        out = []
        for b in range(n):
            z_h = zc[b, : M * U].reshape(U, M)
            H = np.stack([pre["sqrt"][u] @ z_h[u] for u in range(U)], axis=1)
            Y = H @ pre["pilots"].T + zc[b, M * U:].reshape(M, n_p)
            H_hat = mmse_estimate(Y, [cm.entries for cm in self.network.correlations(self.cell)],
                                  pre["pilots"])
            out.append((H, H_hat, mmse_combiner(H_hat, pre["Z"], pre["target"])))
        return out


def effective_channel_sampler(config: NetworkConfig, cell: int, user: int, rho: float,
                              network: MimoNetwork | None = None) -> EffectiveChannelSampler:
    """Sampler of user ``user`` in cell ``cell`` at transmit power ``rho`` (mW)."""
    net = network if network is not None and network.config == config else MimoNetwork(config)
    return EffectiveChannelSampler(net, cell, user, rho)


_CONFIG_FIELDS = {f.name for f in fields(NetworkConfig)}


def network_config_from_table(table: dict) -> NetworkConfig:
    """:class:`NetworkConfig` from a ``[network]`` table; unknown keys are rejected."""
    net = dict(table)
    unknown = set(net) - _CONFIG_FIELDS
    if unknown:
        raise ValueError(f"unknown [network] keys: {sorted(unknown)}")
    if "user_angles_deg" in net:
        net["user_angles_deg"] = tuple(tuple(a) if isinstance(a, list) else a for a in net["user_angles_deg"])
    return NetworkConfig(**net)


def load_scenario(path: str | Path) -> tuple[NetworkConfig, dict]:
    """Parse a TOML scenario file; returns the network config and the other tables."""
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    rest = {k: v for k, v in data.items() if k != "network"}
    return network_config_from_table(data.get("network", {})), rest
