import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roughvol.kernel import build_soe_approach_b
from roughvol.pricing import (
    accumulate_moment_stats,
    bs_price,
    bs_vega,
    implied_vol,
    moment_rmse,
    norm_cdf,
    price_european,
    smile_from_terminal,
)


def test_price_degenerate_samples():
    terminal = np.ones(100)
    price, se = price_european(terminal, ("call", 0.5), r=0.0, T=1.0)
    assert price == 0.5
    assert se == 0.0


def test_price_zero_strike_recovers_mean():
    rng = np.random.default_rng(1)
    terminal = np.abs(rng.normal(1.0, 0.2, size=10_000))
    price, _ = price_european(terminal, ("call", 0.0), r=0.0, T=1.0)
    assert price == pytest.approx(terminal.mean(), rel=1e-14)


def test_price_discounting():
    terminal = np.full(10, 2.0)
    price, _ = price_european(terminal, ("call", 1.0), r=0.05, T=2.0)
    assert price == pytest.approx(math.exp(-0.1), rel=1e-14)


def test_put_call_parity_exact_on_shared_paths():
    rng = np.random.default_rng(2)
    terminal = np.abs(rng.normal(1.0, 0.3, size=5000))
    for k in (0.8, 1.0, 1.25):
        call, _ = price_european(terminal, ("call", k), 0.0, 1.0)
        put, _ = price_european(terminal, ("put", k), 0.0, 1.0)
        assert call - put == pytest.approx(terminal.mean() - k, abs=1e-12)


def test_price_needs_samples():
    with pytest.raises(ValueError):
        price_european([1.0], ("call", 1.0), 0.0, 1.0)


def test_norm_cdf_accuracy():
    assert norm_cdf(0.0) == 0.5
    assert norm_cdf(0.1) == pytest.approx(0.5 + 0.5 * math.erf(0.1 / math.sqrt(2)), abs=1e-16)
    assert norm_cdf(-8.0) == pytest.approx(6.22096e-16, rel=1e-4)


def test_bs_price_limits():
    assert bs_price(1.0, 0.9, 1.0, 1e-8) == pytest.approx(0.1, abs=1e-9)
    assert bs_price(1.0, 1.1, 1.0, 1e-8) == pytest.approx(0.0, abs=1e-12)
    assert bs_price(1.0, 0.0, 1.0, 0.2) == 1.0


def test_bs_price_atm_closed_form():
    # s0 = K = 1, T = 1, sigma = 0.2: price = 2 Phi(0.1) - 1
    ref = 2.0 * (0.5 + 0.5 * math.erf(0.1 / math.sqrt(2.0))) - 1.0
    assert bs_price(1.0, 1.0, 1.0, 0.2) == pytest.approx(ref, abs=1e-15)
    assert ref == pytest.approx(0.0797, abs=5e-5)


def test_bs_price_monotone_in_sigma():
    prices = [bs_price(1.0, 1.05, 0.5, s) for s in np.linspace(0.05, 1.5, 40)]
    assert np.all(np.diff(prices) > 0)


def test_implied_vol_round_trip():
    for sigma in (0.05, 0.2, 0.8):
        price = bs_price(1.0, 1.1, 0.75, sigma, r=0.01)
        out = implied_vol(price, 1.0, 1.1, 0.75, r=0.01)
        assert abs(bs_price(1.0, 1.1, 0.75, out, r=0.01) - price) < 1e-10
        assert out == pytest.approx(sigma, abs=1e-8)


def test_implied_vol_bound_violations():
    with pytest.raises(ValueError, match="bounds"):
        implied_vol(0.0, 1.0, 1.0, 1.0)  # at the lower bound
    with pytest.raises(ValueError, match="bounds"):
        implied_vol(1.5, 1.0, 1.0, 1.0)  # above s0


@settings(max_examples=120, deadline=None)
@given(
    sigma=st.floats(0.01, 2.0),
    k=st.floats(-0.4, 0.4),
    T=st.sampled_from([0.25, 1.0]),
)
def test_implied_vol_newton_robustness(sigma, k, T):
    strike = math.exp(k)
    price = bs_price(1.0, strike, T, sigma)
    if not max(1.0 - strike, 0.0) < price < 1.0:
        return  # degenerate at double precision: nothing to invert
    out = implied_vol(price, 1.0, strike, T)
    assert abs(bs_price(1.0, strike, T, out) - price) < 1e-10


def test_vega_matches_finite_difference():
    h = 1e-6
    num = (bs_price(1.0, 1.1, 0.5, 0.3 + h) - bs_price(1.0, 1.1, 0.5, 0.3 - h)) / (2 * h)
    assert bs_vega(1.0, 1.1, 0.5, 0.3) == pytest.approx(num, rel=1e-8)


def test_smile_flat_for_lognormal_samples():
    rng = np.random.default_rng(3)
    sigma, T = 0.25, 1.0
    z = rng.standard_normal(400_000)
    terminal = np.exp(sigma * math.sqrt(T) * z - 0.5 * sigma**2 * T)
    pts = smile_from_terminal(terminal, 1.0, T, k_min=-0.2, k_max=0.2, n_strikes=9)
    vols = [p.implied_vol for p in pts]
    assert np.nanmax(np.abs(np.array(vols) - sigma)) < 0.005


def test_moment_rmse_zero_eta():
    soe = build_soe_approach_b(0.07, t1=0.125, horizon=1.0, n_terms=4)
    stats = accumulate_moment_stats("msoe", 8, 2000, 1, 0.07, 0.125, soe=soe)
    r1, r2 = moment_rmse(stats, eta=0.0, H=0.07)
    assert r1 == 0.0 and r2 == 0.0


def test_moment_rmse_exact_scheme_small():
    stats = accumulate_moment_stats("exact", 16, 60_000, 5, 0.07, 1.0 / 16)
    r1, r2 = moment_rmse(stats, eta=1.9, H=0.07)
    # the exact law has no bias: both RMSEs are pure Monte Carlo noise
    t = (np.arange(1, 17)) / 16.0
    noise1 = 1.9 * np.sqrt(np.sum(t ** 0.14) / 60_000)
    assert r1 < 5 * noise1
    assert r2 < 5 * 1.9**2 * np.sqrt(2 * np.sum(t**0.28) / 60_000)
