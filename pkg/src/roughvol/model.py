"""Rough Bergomi price/variance simulation under a forward variance curve.

The two-step scheme updates the price with a log-Euler exponential step
(positivity for free) and the variance as

    V(t_{i+1}) = xi0(t_{i+1}) * exp(eta * I(t_{i+1}) - (eta^2/2) t_{i+1}^(2H)),

i.e. the Wick exponential of the Volterra process scaled by the curve.
The Volterra driver comes either from the mSOE recursion or from the
exact Cholesky sampler.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import sampler
from .kernel import SoeApprox
from .sampler import (
    ThetaCovariance,
    build_covariance,
    perp_increments,
    volterra_path_exact,
    volterra_path_msoe,
)


class SimulationError(RuntimeError):
    """Overflow or invalid values encountered while stepping paths."""


@dataclass(frozen=True)
class RBergomiParams:
    s0: float = 1.0
    eta: float = 1.9
    hurst: float = 0.07
    rho: float = -0.9
    t_horizon: float = 1.0
    n_steps: int = 500
    rate: float = 0.0

    def __post_init__(self):
        if self.s0 <= 0.0:
            raise ValueError("s0 must be positive")
        if not 0.0 < self.hurst < 0.5:
            raise ValueError("Hurst index must lie in (0, 1/2)")
        if not -1.0 < self.rho < 0.0:
            raise ValueError("rho must lie in (-1, 0)")
        if self.t_horizon <= 0.0 or self.n_steps < 1:
            raise ValueError("need positive horizon and at least one step")

    @property
    def tau(self) -> float:
        return self.t_horizon / self.n_steps

    @property
    def grid(self) -> np.ndarray:
        """Time grid t_0 = 0, ..., t_n = T."""
        return np.linspace(0.0, self.t_horizon, self.n_steps + 1)


@dataclass(frozen=True)
class ForwardVarianceCurve:
    """Initial forward variance curve xi0(t) >= 0.

    kind "constant" holds a level, "sampled" holds frozen values on a
    uniform grid (linearly interpolated in between), "neural" wraps a
    callable handle (the trained network's forward pass).
    """

    kind: str
    level: float = 0.0
    grid: np.ndarray | None = None
    values: np.ndarray | None = None
    handle: Callable[[np.ndarray], np.ndarray] | None = None

    def __call__(self, t) -> np.ndarray:
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        if self.kind == "constant":
            out = np.full_like(t_arr, self.level)
        elif self.kind == "sampled":
            out = np.interp(t_arr, self.grid, self.values)
        elif self.kind == "neural":
            out = np.asarray(self.handle(t_arr), dtype=float)
        else:
            raise ValueError(f"unknown curve kind {self.kind!r}")
        if np.any(out < 0.0) or not np.all(np.isfinite(out)):
            raise ValueError("forward variance curve must be finite and nonnegative")
        return out


def make_curve_constant(level: float) -> ForwardVarianceCurve:
    if level < 0.0:
        raise ValueError("variance level must be nonnegative")
    return ForwardVarianceCurve(kind="constant", level=float(level))


def make_curve_abs_bm(scale: float, grid: np.ndarray, seed: int) -> ForwardVarianceCurve:
    """xi0(t) = scale * |W_t| for one frozen Brownian path on the grid."""
    if scale < 0.0:
        raise ValueError("scale must be nonnegative")
    grid = np.asarray(grid, dtype=float)
    tau = grid[1] - grid[0]
    if not np.allclose(np.diff(grid), tau):
        raise ValueError("grid must be uniform")
    z = sampler.generic_normals((grid.size - 1,), seed, stream_tag=1)
    w = np.concatenate([[0.0], np.cumsum(np.sqrt(tau) * z)])
    return ForwardVarianceCurve(kind="sampled", grid=grid, values=scale * np.abs(w))


def make_curve_abs_fbm(
    scale: float, h_curve: float, grid: np.ndarray, seed: int
) -> ForwardVarianceCurve:
    """xi0(t) = scale * |W^H_t| for one frozen fractional Brownian path.

    The path is drawn by Cholesky factorization of the fBM autocovariance
    (|t|^2H + |s|^2H - |t-s|^2H) / 2 on the grid.
    """
    if scale < 0.0:
        raise ValueError("scale must be nonnegative")
    if not 0.0 < h_curve < 1.0:
        raise ValueError("curve Hurst index must lie in (0, 1)")
    grid = np.asarray(grid, dtype=float)
    t = grid[1:]
    hh = 2.0 * h_curve
    cov = 0.5 * (
        t[:, None] ** hh + t[None, :] ** hh - np.abs(t[:, None] - t[None, :]) ** hh
    )
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise sampler.CovarianceError("fBM covariance not PD on this grid") from exc
    z = sampler.generic_normals((t.size,), seed, stream_tag=2)
    w = np.concatenate([[0.0], chol @ z])
    return ForwardVarianceCurve(kind="sampled", grid=grid, values=scale * np.abs(w))


@dataclass
class PathBatch:
    """Simulated rBergomi paths; full matrices only kept on request."""

    terminal: np.ndarray
    params: RBergomiParams
    seed: int
    v_mean: np.ndarray            # E[V(t_i)], i = 1..n, accumulated online
    v_se: np.ndarray              # standard error of that mean
    s: np.ndarray | None = None   # (M, n) prices at t_1..t_n
    v: np.ndarray | None = None   # (M, n) variances at t_1..t_n

    @property
    def n_paths(self) -> int:
        return self.terminal.size


def simulate_paths(
    params: RBergomiParams,
    curve: ForwardVarianceCurve,
    scheme: str,
    m_paths: int,
    seed: int,
    soe: SoeApprox | None = None,
    cov: ThetaCovariance | None = None,
    store: str = "terminal",
    threads: int = 1,
) -> PathBatch:
    """Simulate M paths of (S, V) under the given scheme.

    scheme is "msoe" (requires `soe`; `cov` is built if not supplied) or
    "exact".  store="full" keeps the (M, n) price and variance matrices,
    the default keeps terminal prices plus online variance statistics.
    """
    if scheme not in ("msoe", "exact"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if scheme == "msoe":
        if soe is None:
            raise ValueError("msoe scheme requires an SoeApprox")
        if cov is None:
            cov = build_covariance(soe, params.hurst, params.tau)
    n = params.n_steps
    tau = params.tau
    t_grid = params.grid
    xi = curve(t_grid)  # xi0 at t_0..t_n, validated nonnegative
    eta = params.eta
    h2 = params.hurst * 2.0
    drift_corr = 0.5 * eta * eta * t_grid[1:] ** h2
    rho = params.rho
    rho_perp = np.sqrt(1.0 - rho * rho)
    full = store == "full"
    terminal = np.empty(m_paths)
    s_mat = np.empty((m_paths, n)) if full else None
    v_mat = np.empty((m_paths, n)) if full else None
    n_blocks = -(-m_paths // sampler.BLOCK_PATHS)
    v_sum = np.zeros((n_blocks, n))    # per-block rows, reduced in fixed order
    v_sumsq = np.zeros((n_blocks, n))
    exact_factor = None
    if scheme == "exact":
        exact_factor = sampler.exact_joint_factor(params.hurst, n, tau)

    def work(block, lo, hi):
        m = hi - lo
        if scheme == "msoe":
            drv = volterra_path_msoe(soe, cov, n, seed, count=m, _block_offset=block)
        else:
            drv = volterra_path_exact(
                params.hurst, n, tau, seed, count=m,
                _factor=exact_factor, _block_offset=block,
            )
        perp = perp_increments(n, seed, m, tau, _block_offset=block)
        s = np.full(m, params.s0)
        v = np.full(m, xi[0])
        for i in range(n):
            dz = rho * drv.dw[:, i] + rho_perp * perp[:, i]
            s = s * np.exp(np.sqrt(v) * dz - 0.5 * tau * v)
            v = xi[i + 1] * np.exp(eta * drv.i_values[:, i] - drift_corr[i])
            if not (np.all(np.isfinite(s)) and np.all(np.isfinite(v))):
                raise SimulationError(f"non-finite path value at step {i + 1}")
            if full:
                s_mat[lo:hi, i] = s
                v_mat[lo:hi, i] = v
            v_sum[block, i] = v.sum()
            v_sumsq[block, i] = np.dot(v, v)
        terminal[lo:hi] = s

    sampler._run_blocks(work, m_paths, threads)
    v_mean = v_sum.sum(axis=0) / m_paths
    v_var = np.maximum(v_sumsq.sum(axis=0) / m_paths - v_mean**2, 0.0)
    v_se = np.sqrt(v_var / m_paths)
    return PathBatch(
        terminal=terminal, params=params, seed=seed,
        v_mean=v_mean, v_se=v_se, s=s_mat, v=v_mat,
    )


def write_price_paths_csv(batch: PathBatch, path) -> None:
    """``path_id,step,t,S,V`` rows; requires store="full"."""
    if batch.s is None:
        raise ValueError("batch was not simulated with store='full'")
    t = batch.params.grid[1:]
    with open(path, "w") as fh:
        fh.write("path_id,step,t,S,V\n")
        for p in range(batch.n_paths):
            for k in range(batch.params.n_steps):
                fh.write(
                    f"{p},{k + 1},{t[k]:.17g},{batch.s[p, k]:.17g},{batch.v[p, k]:.17g}\n"
                )
