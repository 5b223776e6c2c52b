import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from rcusbound.density import (
    FadeSample,
    LinkParams,
    RocError,
    block_coeffs,
    g_mgf,
    info_density,
    kappa_block,
    mean_variance,
    roc_interval,
)


def link(s=0.5, rho=2.0, sigma2=1.0):
    return LinkParams(rho=rho, s=s, n_p=1, n_s=1, n_b=1, rate=0.1, sigma2=sigma2)


def mc_density(fs, lp, n, seed):
    """Symbol-level samples of the information density for one block."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((4, n)) * math.sqrt(0.5)
    x = (z[0] + 1j * z[1]) * math.sqrt(lp.rho)
    w = (z[2] + 1j * z[3]) * math.sqrt(fs.sigma2_block)
    y = fs.h * x + w
    return info_density(x, y, fs.h_hat, lp)


fade = st.builds(
    FadeSample,
    h=st.complex_numbers(max_magnitude=3.0, allow_nan=False, allow_infinity=False),
    h_hat=st.complex_numbers(max_magnitude=3.0, allow_nan=False, allow_infinity=False),
    sigma2_block=st.floats(0.05, 3.0),
)
links = st.builds(link, s=st.floats(0.05, 3.0), rho=st.floats(0.1, 20.0))


class TestLinkParams:
    def test_blocklength_split(self):
        lp = LinkParams.from_blocklength(288, 8, 3, rho=1.0, s=1.0, rate=0.1)
        assert (lp.n_c, lp.n_s, lp.n_b) == (36, 33, 8)
        assert lp.threshold == pytest.approx(288 * 0.1)

    def test_rejects_nondivisor(self):
        with pytest.raises(ValueError):
            LinkParams.from_blocklength(288, 7, 3, rho=1.0, s=1.0, rate=0.1)

    @pytest.mark.parametrize("kw", [dict(rho=0.0), dict(s=-1.0), dict(rate=0.0), dict(n_p=0), dict(n_s=0)])
    def test_invariants(self, kw):
        base = dict(rho=1.0, s=1.0, n_p=1, n_s=1, n_b=1, rate=0.1)
        base.update(kw)
        with pytest.raises(ValueError):
            LinkParams(**base)


class TestBlockCoeffs:
    def test_hand_example(self):
        co = block_coeffs(FadeSample(1.0, 1.0, 1.0), link(s=0.5, rho=2.0))
        assert_allclose([co.alpha, co.beta, co.nu, co.log_term], [0.5, 0.75, 1 / 3, math.log(2)], rtol=1e-14)

    def test_zero_estimate(self):
        co = block_coeffs(FadeSample(0.7 - 0.2j, 0.0, 1.3), link(s=0.4, rho=3.0))
        assert co.log_term == 0.0
        assert_allclose(co.beta, 0.4 * (3.0 * abs(0.7 - 0.2j) ** 2 + 1.3))

    def test_zero_channel(self):
        co = block_coeffs(FadeSample(0.0, 0.0, 2.0), link(s=0.5))
        assert co.alpha == co.beta == 1.0
        assert co.nu == 1.0

    def test_nu_range_random(self):
        rng = np.random.default_rng(0)
        n = 100_000
        h = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        hh = h + 0.5 * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
        co = block_coeffs(FadeSample(h, hh, rng.uniform(0.1, 2, n)), link(s=0.7, rho=5.0))
        assert np.all((co.nu >= 0) & (co.nu <= 1))

    def test_hand_example_against_moments(self):
        # alpha, beta, nu as second moments of a = y - h_hat x and b = y / sqrt(1 + s rho |h_hat|^2)
        fs, lp = FadeSample(1.0, 1.0, 1.0), link(s=0.5, rho=2.0)
        rng = np.random.default_rng(1)
        n = 1_000_000
        z = rng.standard_normal((4, n)) * math.sqrt(0.5)
        x = (z[0] + 1j * z[1]) * math.sqrt(lp.rho)
        y = fs.h * x + (z[2] + 1j * z[3])
        a = y - fs.h_hat * x
        b = y / math.sqrt(1 + lp.s * lp.rho)
        alpha = lp.s * np.mean(np.abs(a) ** 2)
        beta = lp.s * np.mean(np.abs(b) ** 2)
        cross = lp.s ** 2 * abs(np.mean(a * np.conj(b))) ** 2
        assert_allclose([alpha, beta, cross / (alpha * beta)], [0.5, 0.75, 1 / 3], atol=0.01)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_raises(self):
        with pytest.raises(FloatingPointError):
            block_coeffs(FadeSample(1.0, 1e200, 1.0), link())


class TestInfoDensity:
    def test_zero_signal(self):
        assert_allclose(info_density(0.0, 0.0, 1.0, link(s=1.0, rho=1.0)), math.log(2))

    def test_zero_estimate(self):
        assert info_density(1 + 1j, 0.3 - 2j, 0.0, link()) == pytest.approx(0.0, abs=1e-15)

    def test_mean_matches_closed_form(self):
        fs, lp = FadeSample(1.0 + 0.3j, 0.9 - 0.1j, 1.0), link(s=0.4, rho=2.0)
        d = mc_density(fs, lp, 1_000_000, 2)
        i_s, _ = mean_variance(fs, lp)
        assert abs(d.mean() - i_s) < 3 * d.std() / math.sqrt(d.size)


class TestMeanVariance:
    def test_matched_estimate(self):
        # alpha = beta = 1, yet 2 alpha beta (1 - nu) = 2 s^2 rho sigma2 |h_hat|^2 / (1 + s rho) = 1
        i_s, v_s = mean_variance(FadeSample(1.0, 1.0, 1.0), link(s=1.0, rho=1.0))
        assert_allclose(i_s, math.log(2), rtol=1e-14)
        assert_allclose(v_s, 1.0, rtol=1e-14)

    def test_zero_channel(self):
        i_s, v_s = mean_variance(FadeSample(0.0, 0.0, 1.0), link())
        assert i_s == 0.0 and v_s == 0.0

    def test_matched_estimate_against_mc(self):
        fs, lp = FadeSample(1.0, 1.0, 1.0), link(s=1.0, rho=1.0)
        d = mc_density(fs, lp, 2_000_000, 3)
        assert_allclose(d.var(), 1.0, rtol=0.01)

    @pytest.mark.parametrize("seed", [4, 5])
    def test_random_block_against_mc(self, seed):
        rng = np.random.default_rng(seed)
        h = complex(*rng.standard_normal(2))
        fs = FadeSample(h, h + 0.3 * complex(*rng.standard_normal(2)), rng.uniform(0.5, 1.5))
        lp = link(s=rng.uniform(0.2, 1.5), rho=rng.uniform(0.5, 5))
        d = mc_density(fs, lp, 2_000_000, seed + 10)
        i_s, v_s = mean_variance(fs, lp)
        n = d.size
        assert abs(d.mean() - i_s) < 3 * d.std() / math.sqrt(n)
        # standard error of the sample variance from the fourth central moment
        m4 = np.mean((d - d.mean()) ** 4)
        assert abs(d.var() - v_s) < 3 * math.sqrt((m4 - d.var() ** 2) / n)


class TestMgfAndCgf:
    def test_normalization(self):
        assert g_mgf(0.0, FadeSample(0.4 + 1j, -0.2j, 0.8), link()) == 1.0

    def test_zero_channel_is_one(self):
        fs = FadeSample(0.0, 0.0, 1.0)
        for z in (-3.0, 0.5, 7.0):
            assert g_mgf(z, fs, link()) == 1.0

    def test_mgf_against_mc(self):
        fs, lp = FadeSample(1.0, 0.9, 1.0), link(s=0.4, rho=2.0)
        d = mc_density(fs, lp, 2_000_000, 6)
        e = np.exp(-0.3 * d)
        assert abs(e.mean() - g_mgf(0.3, fs, lp)) < 3 * e.std() / math.sqrt(e.size)

    @pytest.mark.parametrize("seed", [7, 8, 9])
    def test_mgf_oracle_random(self, seed):
        rng = np.random.default_rng(seed)
        h = complex(*rng.standard_normal(2)) * 0.7
        fs = FadeSample(h, h + 0.4 * complex(*rng.standard_normal(2)), rng.uniform(0.5, 1.5))
        lp = link(s=rng.uniform(0.2, 1.0), rho=rng.uniform(0.5, 3))
        roc = roc_interval(fs, lp)
        d = mc_density(fs, lp, 1_000_000, seed + 20)
        for z in (-0.2, 0.1, 0.5):
            # keep well inside the ROC so the MC estimator has a finite variance
            z = float(np.clip(z, 0.4 * roc.zeta_lo, 0.4 * roc.zeta_hi))
            e = np.exp(-z * d)
            assert abs(e.mean() - g_mgf(z, fs, lp)) < 4 * e.std() / math.sqrt(e.size)

    def test_origin_identities(self):
        fs, lp = FadeSample(0.3 - 1.1j, 0.5 - 0.8j, 1.2), link(s=0.8, rho=4.0)
        k = kappa_block(0.0, fs, lp)
        i_s, v_s = mean_variance(fs, lp)
        assert k.value == 0.0
        assert_allclose(k.d1, -i_s, rtol=1e-12)
        assert_allclose(k.d2, v_s, rtol=1e-12)

    def test_finite_differences(self):
        fs, lp = FadeSample(1.0 + 0.2j, 0.8, 1.0), link(s=0.6, rho=2.5)
        h, z = 1e-5, 0.2
        kp, k0, km = (kappa_block(z + d, fs, lp).value for d in (h, 0.0, -h))
        k = kappa_block(z, fs, lp)
        assert_allclose((kp - km) / (2 * h), k.d1, rtol=1e-6)
        h2 = 1e-4
        kp, km = kappa_block(z + h2, fs, lp).value, kappa_block(z - h2, fs, lp).value
        assert_allclose((kp - 2 * k0 + km) / h2 ** 2, k.d2, rtol=1e-4)

    def test_g_derivatives_consistent(self):
        from rcusbound.density import g_derivatives

        fs, lp = FadeSample(0.5, 0.6, 1.0), link()
        g, g1, g2 = g_derivatives(0.3, fs, lp)
        h = 1e-5
        assert_allclose(g, g_mgf(0.3, fs, lp), rtol=1e-14)
        assert_allclose(g1, (g_mgf(0.3 + h, fs, lp) - g_mgf(0.3 - h, fs, lp)) / (2 * h), rtol=1e-7)

    @settings(max_examples=200, deadline=None)
    @given(fade, links, st.floats(0.0, 0.999))
    def test_convex_inside_roc(self, fs, lp, frac):
        roc = roc_interval(fs, lp)
        for side in (roc.zeta_lo, roc.zeta_hi):
            z = frac * side if math.isfinite(side) else frac * 50.0 * np.sign(side)
            k = kappa_block(z, fs, lp)
            _, v = mean_variance(fs, lp)
            if v > 0:
                assert k.d2 > 0
            else:
                assert k.d2 >= 0

    def test_convex_vectorized(self):
        rng = np.random.default_rng(11)
        n = 1000
        h = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        fs = FadeSample(h, h + 0.3 * (rng.standard_normal(n) + 1j * rng.standard_normal(n)), 1.0)
        lp = link(s=0.9, rho=3.0)
        roc = roc_interval(fs, lp)
        for frac in (-0.9, -0.3, 0.3, 0.9):
            side = roc.zeta_hi if frac > 0 else roc.zeta_lo
            z = np.where(np.isfinite(side), abs(frac) * side, frac * 10)
            assert np.all(kappa_block(z, fs, lp).d2 > 0)


class TestRoc:
    def test_symmetric_roots(self):
        # alpha = beta and nu = 0 need |h_hat| large relative to the noise; construct directly
        from rcusbound.density import BlockCoeffs, _roc_from_coeffs

        co = BlockCoeffs(2.0, 2.0, 0.0, 0.0, quad=4.0)
        lo, hi = _roc_from_coeffs(co)
        assert_allclose([lo, hi], [-0.5, 0.5], rtol=1e-15)

    def test_linear_degeneracy(self):
        # h = h_hat = 0: alpha = beta, quadratic vanishes entirely; both sides unbounded
        roc = roc_interval(FadeSample(0.0, 0.0, 1.0), link())
        assert roc.zeta_lo == -np.inf and roc.zeta_hi == np.inf

    def test_zero_estimate_unbounded(self):
        # h_hat = 0 gives alpha = beta and no quadratic term
        roc = roc_interval(FadeSample(1.0, 0.0, 1.0), link())
        assert roc.zeta_lo == -np.inf and roc.zeta_hi == np.inf

    def test_linear_half_line(self):
        from rcusbound.density import BlockCoeffs, _roc_from_coeffs

        lo, hi = _roc_from_coeffs(BlockCoeffs(1.0, 3.0, 1.0, 0.0, quad=0.0))
        assert lo == -0.5 and hi == np.inf
        lo, hi = _roc_from_coeffs(BlockCoeffs(3.0, 1.0, 1.0, 0.0, quad=0.0))
        assert lo == -np.inf and hi == 0.5

    def test_pole_location(self):
        fs, lp = FadeSample(1.0 + 0.5j, 0.7, 1.0), link(s=0.5, rho=2.0)
        roc = roc_interval(fs, lp)
        assert roc.zeta_lo < 0 < roc.zeta_hi
        assert math.isfinite(g_mgf(0.999 * roc.zeta_hi, fs, lp))
        assert math.isfinite(g_mgf(0.999 * roc.zeta_lo, fs, lp))
        with pytest.raises(RocError):
            g_mgf(1.001 * roc.zeta_hi, fs, lp)
        with pytest.raises(RocError):
            kappa_block(1.001 * roc.zeta_lo, fs, lp)

    def test_endpoints_are_roots(self):
        fs, lp = FadeSample(0.2 - 1j, -0.4j, 0.7), link(s=1.3, rho=6.0)
        co = block_coeffs(fs, lp)
        roc = roc_interval(fs, lp)
        for z in (roc.zeta_lo, roc.zeta_hi):
            q = 1 + (co.beta - co.alpha) * z - co.alpha * co.beta * (1 - co.nu) * z * z
            assert abs(q) < 1e-10

    def test_roc_error_counts_blocks(self):
        fs = FadeSample(np.array([1.0, 1.0, 0.0]), np.array([0.9, 0.9, 0.0]), 1.0)
        with pytest.raises(RocError) as exc:
            kappa_block(100.0, fs, link())
        assert exc.value.violations == 2
