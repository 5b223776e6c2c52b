import math

import numpy as np
import pytest


def brute_force_conditional(h, h_hat, sigma2, lp, n_trials, seed, chunk=20_000):
    """Conditional RCUs probability by symbol-level simulation.

    Draws codeword symbols and noise for every block, forms the summed
    information density and averages ``min(1, exp(T - sum))``, which is the
    probability over the uniform variable in closed form.  Written out
    independently of the package.  Returns ``(mean, standard error)``.
    """
    h = np.atleast_1d(np.asarray(h, dtype=complex))
    h_hat = np.atleast_1d(np.asarray(h_hat, dtype=complex))
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), h.shape)
    rng = np.random.default_rng(seed)
    s, rho = lp.s, lp.rho
    gain = 1.0 + s * rho * np.abs(h_hat) ** 2
    vals = []
    done = 0
    while done < n_trials:
        m = min(chunk, n_trials - done)
        shape = (m, h.size, lp.n_s)
        x = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * math.sqrt(rho / 2)
        w = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * np.sqrt(sigma2 / 2)[:, None]
        y = h[:, None] * x + w
        dens = (-s * np.abs(y - h_hat[:, None] * x) ** 2 + s * np.abs(y) ** 2 / gain[:, None]
                + np.log(gain)[:, None])
        tot = dens.sum(axis=(1, 2))
        vals.append(np.exp(np.minimum(lp.threshold - tot, 0.0)))
        done += m
    v = np.concatenate(vals)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


@pytest.fixture
def brute_force():
    return brute_force_conditional


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
