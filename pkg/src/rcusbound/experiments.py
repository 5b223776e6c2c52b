"""Parameter optimization, required-power search, accuracy metric and campaigns.

An *evaluator* is a callable ``lp -> epsilon``.  Evaluators compose: the
s-optimizing wrapper is itself an evaluator, so ``required_power`` can run
an inner optimization at every power without knowing about it.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import optimize

from .approx_nb import SampleSet, normal_nb_estimate, saddlepoint_nb
from .approx_ns import average_over_channels
from .channel_mimo import EffectiveChannelSampler, MimoNetwork, NetworkConfig
from .channel_siso import SisoRayleigh
from .density import LinkParams, RocError, bits_to_nats, nats_to_bits
from .numerics import StreamKey
from .oracle import rcus_estimate

__all__ = [
    "METHODS",
    "CSV_COLUMNS",
    "EvalResult",
    "SisoScenario",
    "MimoScenario",
    "Evaluator",
    "BracketError",
    "evaluate",
    "gaussian_budget",
    "optimize_s",
    "optimize_np",
    "with_s_optimization",
    "required_power",
    "optimized_operating_point",
    "accuracy_metric",
    "AccuracyResult",
    "min_samples_for_accuracy",
    "CampaignSpec",
    "run_campaign",
    "write_csv",
    "db_to_linear",
    "linear_to_db",
]

METHODS = ("rcus", "normal_ns", "sp_ns", "normal_nb", "sp_nb")
_ALIASES = {"saddlepoint_ns": "sp_ns", "saddlepoint_nb": "sp_nb", "oracle": "rcus"}

CSV_COLUMNS = ("scenario_id", "method", "n_b", "n_c", "n_p", "rho_dB", "s", "rate_bits", "epsilon",
               "std_error", "zeta", "regime", "clipped", "n_gauss_samples", "wall_ms")

S_BRACKET = (1e-3, 1e2)
S_GRID_POINTS = 12


def db_to_linear(x_db: float) -> float:
    return 10.0 ** (x_db / 10.0)


def linear_to_db(x: float) -> float:
    return 10.0 * math.log10(x)


def canonical_method(method: str) -> str:
    m = _ALIASES.get(method, method)
    if m not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    return m


class BracketError(ValueError):
    """The search bracket does not straddle the target."""


@dataclass(frozen=True)
class SisoScenario:
    scenario_id: str = "siso"

    def sampler(self, lp: LinkParams) -> SisoRayleigh:
        return SisoRayleigh.from_link(lp)


@dataclass
class MimoScenario:
    """User ``user`` of cell ``cell`` in a :class:`NetworkConfig`; ``rho`` in mW."""

    config: NetworkConfig
    cell: int = 0
    user: int = 0
    scenario_id: str = "mimo"
    _network: MimoNetwork | None = field(default=None, init=False, repr=False)
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    @property
    def network(self) -> MimoNetwork:
        if self._network is None:
            self._network = MimoNetwork(self.config)
            self._network.correlations(self.cell)
        return self._network

    def sampler(self, lp: LinkParams):
        if lp.n_p != self.config.pilot_length:
            raise ValueError(f"link n_p={lp.n_p} differs from the network pilot length "
                             f"{self.config.pilot_length}")
        if lp.rho not in self._cache:
            if len(self._cache) > 64:
                self._cache.clear()
            self._cache[lp.rho] = EffectiveChannelSampler(self.network, self.cell, self.user, lp.rho)
        return self._cache[lp.rho]


@dataclass
class EvalResult:
    epsilon: float
    std_error: float
    zeta: float = math.nan
    regime: str = ""
    clipped: bool = False
    n_gauss: int = 0
    wall_ms: float = 0.0


def gaussian_budget(method: str, sampler, lp: LinkParams, samples: int) -> int:
    """Real Gaussian scalars consumed by ``samples`` Monte-Carlo units of ``method``."""
    method = canonical_method(method)
    rpb = int(sampler.reals_per_block)
    if method in ("sp_nb", "normal_nb"):
        return samples * rpb
    if method in ("sp_ns", "normal_ns"):
        return samples * lp.n_b * rpb
    return samples * lp.n_b * (rpb + 4 * lp.n_s)


def samples_for_budget(method: str, sampler, lp: LinkParams, n_reals: int) -> int:
    """Largest unit count whose Gaussian budget does not exceed ``n_reals`` (at least 2)."""
    per = gaussian_budget(method, sampler, lp, 1)
    return max(2, int(n_reals) // max(per, 1))


def evaluate(method: str, scenario, lp: LinkParams, samples: int, key: StreamKey,
             workers: int = 1) -> EvalResult:
    """One evaluation of ``method``.

    ``samples`` counts block draws for the ``n_b`` methods, ``n_b``-tuples
    for the ``n_s`` methods and trials for the oracle.
    """
    method = canonical_method(method)
    sampler = scenario.sampler(lp)
    t0 = time.perf_counter()
    if method == "sp_nb":
        r = saddlepoint_nb(sampler, lp, samples, key, workers=workers)
        out = EvalResult(r.epsilon, r.diagnostics.get("std_error", math.nan), r.zeta, r.regime, r.clipped)
    elif method == "normal_nb":
        eps, se = normal_nb_estimate(sampler, lp, samples, key, workers=workers)
        out = EvalResult(eps, se, 0.0, "normal")
    elif method in ("sp_ns", "normal_ns"):
        name = "saddlepoint_ns" if method == "sp_ns" else "normal_ns"
        eps, se = average_over_channels(sampler, lp, samples, name, key, workers=workers)
        out = EvalResult(eps, se, math.nan, "averaged" if method == "sp_ns" else "normal")
    else:
        r = rcus_estimate(sampler, lp, samples, key, workers=workers)
        se = math.sqrt(max(r.epsilon_hat * (1 - r.epsilon_hat), 0.0) / r.n_trials)
        out = EvalResult(r.epsilon_hat, se, math.nan, "oracle")
    out.n_gauss = gaussian_budget(method, sampler, lp, samples)
    out.wall_ms = 1e3 * (time.perf_counter() - t0)
    return out


@dataclass
class Evaluator:
    """``lp -> epsilon`` for a fixed method, scenario, sample count and key."""

    method: str
    scenario: object
    samples: int
    key: StreamKey
    workers: int = 1
    last: EvalResult | None = field(default=None, init=False)

    def result(self, lp: LinkParams) -> EvalResult:
        self.last = evaluate(self.method, self.scenario, lp, self.samples, self.key, self.workers)
        return self.last

    def __call__(self, lp: LinkParams) -> float:
        return self.result(lp).epsilon


def _safe(evaluator, lp) -> float:
    try:
        v = float(evaluator(lp))
    except (RocError, FloatingPointError, np.linalg.LinAlgError):
        return math.inf
    return v if math.isfinite(v) else math.inf


def optimize_s(evaluator: Callable[[LinkParams], float], lp: LinkParams,
               bracket: Sequence[float] = S_BRACKET, xtol: float = 1e-3,
               grid_points: int = S_GRID_POINTS) -> tuple[float, float]:
    """Minimize ``evaluator`` over ``s``; returns ``(s_opt, epsilon_opt)``.

    A log-spaced coarse grid seeds a bracket around the best point, which is
    refined by bounded Brent (golden-section with parabolic steps) on
    ``log s`` down to ``xtol``.
    """
    lo, hi = math.log(bracket[0]), math.log(bracket[1])
    if not lo < hi:
        raise ValueError("empty s bracket")
    grid = np.linspace(lo, hi, int(grid_points))
    vals = np.array([_safe(evaluator, replace(lp, s=math.exp(x))) for x in grid])
    if not np.any(np.isfinite(vals)):
        raise ValueError("every coarse-grid evaluation of s failed")
    i = int(np.argmin(vals))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = optimize.minimize_scalar(lambda x: _safe(evaluator, replace(lp, s=math.exp(x))),
                                   bounds=(a, b), method="bounded", options={"xatol": xtol})
    if res.fun <= vals[i]:
        return float(math.exp(res.x)), float(res.fun)
    return float(math.exp(grid[i])), float(vals[i])


def with_s_optimization(evaluator, bracket: Sequence[float] = S_BRACKET, xtol: float = 1e-2):
    """Evaluator that reports the minimum over ``s`` of ``evaluator``."""

    def inner(lp: LinkParams) -> float:
        return optimize_s(evaluator, lp, bracket, xtol)[1]

    return inner


def optimize_np(evaluator: Callable[[LinkParams], float], lp: LinkParams,
                np_range: Iterable[int] | None = None, optimize_inner_s: bool = True,
                s_bracket: Sequence[float] = S_BRACKET, xtol: float = 1e-2,
                coarse: int | None = None) -> tuple[int, float]:
    """Search over the number of pilots at fixed ``n_c``; ties go to smaller ``n_p``.

    The search is exhaustive unless ``coarse`` is given. In that case a
    log-spaced grid of about ``coarse`` candidates is evaluated first, and
    then every integer between the neighbours of the best grid point. This
    is exact for unimodal ``epsilon(n_p)``.
    """
    n_c = lp.n_c
    cands = sorted(set(range(1, n_c)) if np_range is None else {int(n) for n in np_range})
    cands = [n for n in cands if 1 <= n <= n_c - 1]
    if not cands:
        raise ValueError(f"no feasible n_p for n_c={n_c}")
    memo: dict[int, float] = {}

    def value(n_p):
        if n_p not in memo:
            lpn = replace(lp, n_p=n_p, n_s=n_c - n_p)
            memo[n_p] = (optimize_s(evaluator, lpn, s_bracket, xtol)[1] if optimize_inner_s
                         else _safe(evaluator, lpn))
        return memo[n_p]

    def best_of(ns):
        best = (None, math.inf)
        for n_p in ns:
            if value(n_p) < best[1]:
                best = (n_p, value(n_p))
        return best

    if coarse is None or len(cands) <= coarse:
        best = best_of(cands)
    else:
        idx = np.unique(np.round(np.geomspace(1, len(cands), int(coarse))).astype(int) - 1)
        grid = [cands[i] for i in idx]
        g, _ = best_of(grid)
        if g is None:
            raise ValueError("every n_p evaluation failed")
        j = grid.index(g)
        lo, hi = grid[max(j - 1, 0)], grid[min(j + 1, len(grid) - 1)]
        best = best_of([n for n in cands if lo <= n <= hi])
    if best[0] is None:
        raise ValueError("every n_p evaluation failed")
    return best


def _log10_eps(x: float) -> float:
    return math.log10(max(x, 1e-300))


def required_power(evaluator: Callable[[LinkParams], float], lp: LinkParams, target_epsilon: float,
                   rho_bracket_dB: Sequence[float] = (-10.0, 30.0), log_tol: float = 0.05,
                   db_tol: float = 0.01, max_iter: int = 100) -> float:
    """Smallest ``rho`` (linear) with ``epsilon(rho) = target_epsilon``.

    Bisection in dB, stopping when ``|log10 eps - log10 target| <= log_tol``
    or the bracket is narrower than ``db_tol``; the result is then refined by
    interpolating ``log10 eps`` linearly in dB across the final bracket.

    Raises
    ------
    BracketError
        If ``epsilon`` at the bracket ends does not straddle the target with
        ``epsilon`` decreasing in ``rho``.
    """
    if not 0.0 < target_epsilon < 1.0:
        raise ValueError("target_epsilon must lie in (0, 1)")
    t = math.log10(target_epsilon)

    def f(x_db):
        return _log10_eps(evaluator(replace(lp, rho=db_to_linear(x_db)))) - t

    a, b = float(rho_bracket_dB[0]), float(rho_bracket_dB[1])
    fa, fb = f(a), f(b)
    if not (fa > 0 > fb):
        raise BracketError(f"epsilon does not decrease through the target over [{a}, {b}] dB "
                           f"(log10 eps - log10 target = {fa:.3g}, {fb:.3g})")
    for _ in range(max_iter):
        m = 0.5 * (a + b)
        fm = f(m)
        if fm > 0:
            a, fa = m, fm
        else:
            b, fb = m, fm
        if abs(fm) <= log_tol or b - a <= db_tol:
            break
    if math.isfinite(fa) and math.isfinite(fb) and fa != fb:
        x = a + fa * (b - a) / (fa - fb)
    else:
        x = 0.5 * (a + b)
    return db_to_linear(x)


def optimized_operating_point(evaluator: Callable[[LinkParams], float], lp: LinkParams,
                              target_epsilon: float, rho_bracket_dB: Sequence[float] = (-10.0, 30.0),
                              s_bracket: Sequence[float] = (0.02, 5.0), xtol: float = 0.05,
                              coarse: int | None = 10, max_rounds: int = 4) -> LinkParams:
    """Link at the smallest power meeting ``target_epsilon`` with ``n_p`` and ``s`` optimized.

    Alternates between the best ``n_p`` at the current power and the
    required power (with inner ``s`` optimization) at that ``n_p``, until
    ``n_p`` repeats. The returned link carries the final ``rho``, ``n_p``
    and the ``s`` minimizing ``epsilon`` there.
    """
    prev = None
    for _ in range(max_rounds):
        n_p, _ = optimize_np(evaluator, lp, s_bracket=s_bracket, xtol=xtol, coarse=coarse)
        lp = replace(lp, n_p=n_p, n_s=lp.n_c - n_p)
        if n_p == prev:
            break
        inner = with_s_optimization(evaluator, s_bracket, xtol)
        lp = replace(lp, rho=required_power(inner, lp, target_epsilon, rho_bracket_dB))
        prev = n_p
    return replace(lp, s=optimize_s(evaluator, lp, s_bracket, xtol)[0])


def accuracy_metric(epsilon_ub: float, estimates) -> float:
    """Normalized mean-squared difference ``mean(((eps_ub - eps_i) / eps_ub)^2)``."""
    if epsilon_ub == 0:
        raise ValueError("epsilon_ub must be nonzero")
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        raise ValueError("estimates must be nonempty")
    return float(np.mean(((epsilon_ub - est) / epsilon_ub) ** 2))


@dataclass
class AccuracyResult:
    n_min: int | None
    reference: float
    trace: list = field(default_factory=list)

    @property
    def reached(self) -> bool:
        return self.n_min is not None

    @property
    def status(self) -> str:
        return f"N_min = {self.n_min}" if self.reached else "threshold unreachable at cap"


def min_samples_for_accuracy(method: str, scenario, lp: LinkParams, key: StreamKey, *,
                             reference: float, threshold: float = 0.005, n_sim: int = 100,
                             n_start: int = 1 << 10, cap: int = 1 << 26,
                             workers: int = 1) -> AccuracyResult:
    """Smallest ``N`` (real Gaussian scalars) on a doubling grid with ``e(N) <= threshold``.

    Trial ``i`` at grid level ``j`` uses ``key.child(j).child(i)``.  Methods
    without Monte-Carlo content reach the threshold at the first grid point.
    """
    method = canonical_method(method)
    sampler = scenario.sampler(lp)
    trace = []
    n, level = int(n_start), 0
    while n <= cap:
        units = samples_for_budget(method, sampler, lp, n)
        used = gaussian_budget(method, sampler, lp, units)
        est = [evaluate(method, scenario, lp, units, key.child(level).child(i), workers).epsilon
               for i in range(n_sim)]
        e = accuracy_metric(reference, est)
        trace.append((n, used, e))
        if e <= threshold:
            return AccuracyResult(n, reference, trace)
        n *= 2
        level += 1
    return AccuracyResult(None, reference, trace)


@dataclass
class CampaignSpec:
    """One campaign: a scenario, a method and a one-dimensional sweep."""

    scenario: object
    method: str
    sweep: str
    grid: list
    link: LinkParams
    samples: int = 100_000
    seed: int = 1
    workers: int = 1
    target_epsilon: float | None = None
    optimize_s: bool = False
    optimize_np: bool = False
    np_range: tuple | None = None
    rho_bracket_dB: tuple = (-10.0, 30.0)
    blocklength: int | None = None

    def __post_init__(self):
        self.method = canonical_method(self.method)
        if self.sweep not in ("power", "s", "n_p", "n_b", "samples"):
            raise ValueError(f"unknown sweep {self.sweep!r}")
        if not self.grid:
            raise ValueError("sweep grid must be nonempty")
        if self.target_epsilon is not None and not 0 < self.target_epsilon < 1:
            raise ValueError("target_epsilon must lie in (0, 1)")


def _row(spec: CampaignSpec, lp: LinkParams, res: EvalResult) -> dict:
    return {
        "scenario_id": getattr(spec.scenario, "scenario_id", "scenario"),
        "method": spec.method,
        "n_b": lp.n_b,
        "n_c": lp.n_c,
        "n_p": lp.n_p,
        "rho_dB": repr(linear_to_db(lp.rho)),
        "s": repr(lp.s),
        "rate_bits": repr(nats_to_bits(lp.rate)),
        "epsilon": repr(res.epsilon),
        "std_error": repr(res.std_error),
        "zeta": repr(res.zeta),
        "regime": res.regime,
        "clipped": int(res.clipped),
        "n_gauss_samples": res.n_gauss,
        "wall_ms": f"{res.wall_ms:.1f}",
    }


def _point(spec: CampaignSpec, lp: LinkParams, samples: int) -> tuple[LinkParams, EvalResult]:
    ev = Evaluator(spec.method, spec.scenario, samples, StreamKey(spec.seed), spec.workers)
    t0 = time.perf_counter()
    if spec.optimize_np:
        n_p, _ = optimize_np(ev, lp, spec.np_range, optimize_inner_s=spec.optimize_s)
        lp = replace(lp, n_p=n_p, n_s=lp.n_c - n_p)
    if spec.optimize_s:
        s, _ = optimize_s(ev, lp)
        lp = replace(lp, s=s)
    if spec.target_epsilon is not None and spec.sweep in ("n_b", "n_p", "s"):
        inner = with_s_optimization(ev) if spec.optimize_s and spec.sweep != "s" else ev
        rho = required_power(inner, lp, spec.target_epsilon, spec.rho_bracket_dB)
        lp = replace(lp, rho=rho)
        if spec.optimize_s and spec.sweep != "s":
            lp = replace(lp, s=optimize_s(ev, lp)[0])
    res = ev.result(lp)
    res.wall_ms = 1e3 * (time.perf_counter() - t0)
    return lp, res


def run_campaign(spec: CampaignSpec) -> list[dict]:
    """Evaluate every grid point in order; rows follow :data:`CSV_COLUMNS`.

    All grid points share the stream key ``(seed, 0)``, so neighbouring
    points are computed on common random numbers.
    """
    rows = []
    base = spec.link
    blocklength = spec.blocklength or base.n_c * base.n_b
    for g in spec.grid:
        lp, samples = base, spec.samples
        if spec.sweep == "power":
            lp = replace(base, rho=db_to_linear(float(g)))
        elif spec.sweep == "s":
            lp = replace(base, s=float(g))
        elif spec.sweep == "n_p":
            lp = replace(base, n_p=int(g), n_s=base.n_c - int(g))
        elif spec.sweep == "n_b":
            lp = LinkParams.from_blocklength(blocklength, int(g), base.n_p, rho=base.rho, s=base.s,
                                             rate=base.rate, sigma2=base.sigma2)
        else:
            samples = int(g)
        lp, res = _point(spec, lp, samples)
        rows.append(_row(spec, lp, res))
    return rows


def write_csv(rows: list[dict], path=None) -> str:
    """Write rows with the fixed column order; returns the CSV text."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def link_from_table(table: dict, rate_unit: str | None = None) -> LinkParams:
    """Build :class:`LinkParams` from a ``[link]`` table.

    Keys: ``blocklength``, ``n_b``, ``n_p``, ``rho_db``, ``s``, ``rate``,
    ``rate_unit`` (``bits`` or ``nats``), ``sigma2``.
    """
    unit = rate_unit or table.get("rate_unit", "bits")
    if unit not in ("bits", "nats"):
        raise ValueError("rate_unit must be 'bits' or 'nats'")
    rate = float(table.get("rate", 0.104))
    rate = bits_to_nats(rate) if unit == "bits" else rate
    return LinkParams.from_blocklength(int(table.get("blocklength", 288)), int(table.get("n_b", 8)),
                                       int(table.get("n_p", 3)), rho=db_to_linear(float(table.get("rho_db", 0.0))),
                                       s=float(table.get("s", 1.0)), rate=rate,
                                       sigma2=float(table.get("sigma2", 1.0)))
