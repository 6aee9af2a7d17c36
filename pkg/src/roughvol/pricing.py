"""Monte Carlo option pricing, implied volatility, and moment diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import sampler
from .kernel import SoeApprox

NEWTON_MAX_ITERS = 100
PRICE_TOL = 1e-10


class InversionError(RuntimeError):
    """Implied-volatility inversion failed to converge."""


def norm_cdf(x):
    """Standard normal CDF via erfc (accurate in both tails)."""
    if np.isscalar(x):
        return 0.5 * math.erfc(-x / math.sqrt(2.0))
    from scipy.special import erfc

    return 0.5 * erfc(-np.asarray(x, dtype=float) / np.sqrt(2.0))


def price_european(terminal, payoff: tuple[str, float], r: float, T: float):
    """Discounted Monte Carlo price and its standard error.

    payoff is ("call", K) or ("put", K).  Summation is numpy pairwise in a
    fixed order, so results do not depend on thread count upstream.
    """
    s_t = np.asarray(terminal, dtype=float).ravel()
    if s_t.size < 2:
        raise ValueError("need at least 2 samples")
    kind, strike = payoff
    if kind == "call":
        h = np.maximum(s_t - strike, 0.0)
    elif kind == "put":
        h = np.maximum(strike - s_t, 0.0)
    else:
        raise ValueError(f"unknown payoff {kind!r}")
    disc = np.exp(-r * T)
    price = disc * float(np.mean(h))
    stderr = disc * float(np.std(h, ddof=1) / np.sqrt(h.size))
    return price, stderr


def bs_price(s0: float, K: float, T: float, sigma: float, r: float = 0.0) -> float:
    """Black-Scholes call price."""
    if T <= 0.0:
        raise ValueError("T must be positive")
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    if K <= 0.0:
        return s0
    vol = sigma * math.sqrt(T)
    d1 = (math.log(s0 / K) + (r + 0.5 * sigma * sigma) * T) / vol
    d2 = d1 - vol
    return s0 * norm_cdf(d1) - K * math.exp(-r * T) * norm_cdf(d2)


def bs_vega(s0: float, K: float, T: float, sigma: float, r: float = 0.0) -> float:
    vol = sigma * math.sqrt(T)
    d1 = (math.log(s0 / K) + (r + 0.5 * sigma * sigma) * T) / vol
    return s0 * math.sqrt(T) * math.exp(-0.5 * d1 * d1) / math.sqrt(2.0 * math.pi)


def implied_vol(price: float, s0: float, K: float, T: float, r: float = 0.0) -> float:
    """Invert the call price by Newton-Raphson with a bisection fallback."""
    lower = max(s0 - K * math.exp(-r * T), 0.0)
    if not lower < price < s0:
        raise ValueError(
            f"price {price} outside the no-arbitrage bounds ({lower}, {s0})"
        )
    k = math.log(K / s0)
    sigma = math.sqrt(2.0 * abs(k + r * T) / T) if abs(k + r * T) > 0 else 0.2
    sigma = min(max(sigma, 1e-3), 5.0)
    for _ in range(NEWTON_MAX_ITERS):
        diff = bs_price(s0, K, T, sigma, r) - price
        if abs(diff) < PRICE_TOL:
            return sigma
        vega = bs_vega(s0, K, T, sigma, r)
        if vega < 1e-14:
            break
        step = diff / vega
        if abs(step) > 1.0:
            step = math.copysign(1.0, step)
        nxt = sigma - step
        if not 1e-9 < nxt < 10.0:
            break
        sigma = nxt
    # bisection fallback: bs_price is strictly increasing in sigma
    lo, hi = 1e-9, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if bs_price(s0, K, T, mid, r) < price:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-14:
            break
    sigma = 0.5 * (lo + hi)
    if abs(bs_price(s0, K, T, sigma, r) - price) > 1e3 * PRICE_TOL:
        raise InversionError(
            f"no convergence for price={price}, K={K}: residual "
            f"{bs_price(s0, K, T, sigma, r) - price:.3g}"
        )
    return sigma


@dataclass(frozen=True)
class SmilePoint:
    k: float
    strike: float
    price: float
    stderr: float
    implied_vol: float


def smile_from_terminal(
    terminal, s0: float, T: float, r: float = 0.0,
    k_min: float = -0.4, k_max: float = 0.4, n_strikes: int = 41,
) -> list[SmilePoint]:
    """Implied-vol smile over a log-moneyness grid from terminal samples."""
    points = []
    for k in np.linspace(k_min, k_max, n_strikes):
        strike = s0 * math.exp(k)
        price, se = price_european(terminal, ("call", strike), r, T)
        lower = max(s0 - strike * math.exp(-r * T), 0.0)
        if not lower < price < s0:
            # deep strikes can price at the bound within MC noise
            points.append(SmilePoint(k, strike, price, se, float("nan")))
            continue
        points.append(SmilePoint(k, strike, price, se, implied_vol(price, s0, strike, T, r)))
    return points


def write_smile_csv(points: list[SmilePoint], path) -> None:
    with open(path, "w") as fh:
        fh.write("k,K,price,stderr,implied_vol\n")
        for p in points:
            fh.write(
                f"{p.k:.17g},{p.strike:.17g},{p.price:.17g},"
                f"{p.stderr:.17g},{p.implied_vol:.17g}\n"
            )


# ---------------------------------------------------------------------------
# Gaussian moment diagnostics


@dataclass(frozen=True)
class MomentStats:
    """Per-step sample moments of the Volterra driver."""

    i_mean: np.ndarray
    i_sq_mean: np.ndarray
    n_paths: int
    tau: float


def accumulate_moment_stats(
    scheme: str,
    n: int,
    m_paths: int,
    seed: int,
    H: float,
    tau: float,
    soe: SoeApprox | None = None,
    cov: sampler.ThetaCovariance | None = None,
    threads: int = 1,
) -> MomentStats:
    """First two sample moments of I(t_i), accumulated block-wise."""
    if scheme == "msoe":
        if soe is None:
            raise ValueError("msoe scheme requires an SoeApprox")
        if cov is None:
            cov = sampler.build_covariance(soe, H, tau)
    exact_factor = None
    if scheme == "exact":
        exact_factor = sampler.exact_joint_factor(H, n, tau)
    n_blocks = -(-m_paths // sampler.BLOCK_PATHS)
    s1 = np.zeros((n_blocks, n))
    s2 = np.zeros((n_blocks, n))

    def work(block, lo, hi):
        m = hi - lo
        if scheme == "msoe":
            drv = sampler.volterra_path_msoe(soe, cov, n, seed, count=m, _block_offset=block)
        else:
            drv = sampler.volterra_path_exact(
                H, n, tau, seed, count=m, _factor=exact_factor, _block_offset=block
            )
        s1[block] = drv.i_values.sum(axis=0)
        s2[block] = (drv.i_values**2).sum(axis=0)

    sampler._run_blocks(work, m_paths, threads)
    return MomentStats(
        i_mean=s1.sum(axis=0) / m_paths,
        i_sq_mean=s2.sum(axis=0) / m_paths,
        n_paths=m_paths,
        tau=tau,
    )


def moment_rmse(stats: MomentStats, eta: float, H: float) -> tuple[float, float]:
    """RMSEs of the first and second moments of eta*I(t) - (eta^2/2) t^(2H).

    The targets are the exact Gaussian moments: mean -(eta^2/2) t^(2H) and
    second moment eta^4 t^(4H)/4 + eta^2 t^(2H).
    """
    n = stats.i_mean.size
    t = stats.tau * np.arange(1, n + 1)
    shift = 0.5 * eta * eta * t ** (2.0 * H)
    g_mean = eta * stats.i_mean - shift
    g_sq = (
        eta * eta * stats.i_sq_mean
        - 2.0 * eta * stats.i_mean * shift
        + shift * shift
    )
    rmse1 = float(np.sqrt(np.sum((g_mean + shift) ** 2)))
    target2 = 0.25 * eta**4 * t ** (4.0 * H) + eta * eta * t ** (2.0 * H)
    rmse2 = float(np.sqrt(np.sum((g_sq - target2) ** 2)))
    return rmse1, rmse2


def write_moments_csv(rows: list[dict], path) -> None:
    with open(path, "w") as fh:
        fh.write("scheme,N,M,rmse1,rmse2\n")
        for r in rows:
            fh.write(f"{r['scheme']},{r['N']},{r['M']},{r['rmse1']:.17g},{r['rmse2']:.17g}\n")
