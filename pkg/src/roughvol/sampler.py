"""Gaussian drivers for the Volterra process.

One time step of the scheme needs the centered (N+2)-vector

    Theta_i = (dW_i, Y_i^1, ..., Y_i^N, J_i),

where Y_i^j = int_{t_{i-1}}^{t_i} exp(-lambda_j (t_i - s)) dW_s and J_i is
the exact local Volterra contribution with variance tau^(2H).  Its
covariance is independent of i, so it is factored once.  For slow rates
(lambda*tau << 1) the Y columns are nearly collinear and the Gram matrix,
while positive definite in exact arithmetic, has eigenvalues far below
double-precision resolution; the Cholesky factor is therefore computed in
adaptive multiprecision and rounded to float64, which reproduces the
covariance to machine precision without any jitter.

Random numbers: streams are keyed by (seed, role, block, step) through
numpy SeedSequence/Philox.  Paths are processed in fixed-size blocks, so
results are bit-identical for any thread count.  Per step, normals are
drawn as an (N+2, block) matrix and transposed, which keeps the draw for
component j independent of the total component count and couples schemes
with different N on shared increments under a common seed.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import mpmath as mp
import numpy as np
from scipy.special import gammainc
from scipy.special import gamma as gamma_fn

from .kernel import SoeApprox
from .quadrature import gauss_jacobi, gauss_legendre, map_rule

BLOCK_PATHS = 4096
EXACT_STEP_CAP = 4096
_ROLE_THETA = 101
_ROLE_PERP = 102
_ROLE_EXACT = 103
_ROLE_GENERIC = 104


class CovarianceError(RuntimeError):
    """Raised when a driver covariance cannot be factored."""


def lower_gamma_ratio(a: float, x) -> np.ndarray:
    """gamma_lower(a, x) / x^a, continuous through x = 0 (value 1/a there).

    Series for small x, regularized incomplete gamma otherwise.
    """
    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty_like(x_arr)
    small = x_arr < 0.5
    if np.any(small):
        xs = x_arr[small]
        acc = np.zeros_like(xs)
        term = np.ones_like(xs)
        for k in range(40):
            acc += term / (a + k)
            term *= -xs / (k + 1.0)
        out[small] = acc
    big = ~small
    if np.any(big):
        xb = x_arr[big]
        out[big] = gammainc(a, xb) * gamma_fn(a) / xb**a
    return out if np.ndim(x) else float(out[0])


def _expm1_ratio(s: np.ndarray) -> np.ndarray:
    """(1 - exp(-s)) / s with the s -> 0 limit handled."""
    s = np.asarray(s, dtype=float)
    safe = np.where(s > 0.0, s, 1.0)
    return np.where(s > 0.0, -np.expm1(-safe) / safe, 1.0)


@dataclass(frozen=True)
class ThetaCovariance:
    """Covariance of the per-step driver vector and its Cholesky factor.

    A leading zero rate makes its Y component identical to the Brownian
    increment; the factor then covers the reduced, nondegenerate vector
    and `zero_rate` records that the duplicate column is reconstructed
    when sampling.
    """

    sigma: np.ndarray
    chol: np.ndarray
    n_soe: int
    tau: float
    H: float
    zero_rate: bool = False

    @property
    def dim(self) -> int:
        return self.n_soe + 2


def build_covariance(soe: SoeApprox, H: float, tau: float) -> ThetaCovariance:
    """Assemble Sigma for the (N+2)-dimensional driver and factor it.

    Entries follow the Wiener-integral formulas; a zero rate takes its
    continuous limits.  Factorization failures (duplicated rates, genuine
    rank deficiency) are reported with the offending pivot index.
    """
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    lam = soe.lam
    N = lam.size
    a = H + 0.5
    sig = np.zeros((N + 2, N + 2))
    sig[0, 0] = tau
    cross = tau * _expm1_ratio(lam * tau)
    sig[0, 1 : N + 1] = cross
    sig[1 : N + 1, 0] = cross
    lam_sum = lam[:, None] + lam[None, :]
    sig[1 : N + 1, 1 : N + 1] = tau * _expm1_ratio(lam_sum * tau)
    loc = np.sqrt(2.0 * H) * tau**a * lower_gamma_ratio(a, lam * tau)
    sig[0, N + 1] = sig[N + 1, 0] = np.sqrt(2.0 * H) / a * tau**a
    sig[1 : N + 1, N + 1] = loc
    sig[N + 1, 1 : N + 1] = loc
    sig[N + 1, N + 1] = tau ** (2.0 * H)
    zero_rate = N > 0 and lam[0] == 0.0
    chol = _cholesky_mp(lam[1:] if zero_rate else lam, H, tau)
    return ThetaCovariance(
        sigma=sig, chol=chol, n_soe=N, tau=tau, H=H, zero_rate=zero_rate
    )


def _expand_zero_rate(theta: np.ndarray) -> np.ndarray:
    """Re-insert the Y column of a zero rate (a copy of the dW column)."""
    return np.insert(theta, 1, theta[:, 0], axis=1)


def _sigma_mp(lam: np.ndarray, H: float, tau: float):
    N = lam.size
    tau_m = mp.mpf(tau)
    H_m = mp.mpf(H)
    a = H_m + mp.mpf(1) / 2
    lam_m = [mp.mpf(float(x)) for x in lam]
    S = mp.zeros(N + 2)
    S[0, 0] = tau_m
    for l in range(N):
        v = (1 - mp.e ** (-lam_m[l] * tau_m)) / lam_m[l] if lam_m[l] > 0 else tau_m
        S[0, l + 1] = S[l + 1, 0] = v
    for k in range(N):
        for l in range(k, N):
            s = lam_m[k] + lam_m[l]
            v = (1 - mp.e ** (-s * tau_m)) / s if s > 0 else tau_m
            S[k + 1, l + 1] = S[l + 1, k + 1] = v
    S[0, N + 1] = S[N + 1, 0] = mp.sqrt(2 * H_m) / a * tau_m**a
    for l in range(N):
        lm = lam_m[l]
        if lm > 0:
            v = mp.sqrt(2 * H_m) * mp.gammainc(a, 0, lm * tau_m) / lm**a
        else:
            v = mp.sqrt(2 * H_m) / a * tau_m**a
        S[l + 1, N + 1] = S[N + 1, l + 1] = v
    S[N + 1, N + 1] = tau_m ** (2 * H_m)
    return S


def _cholesky_mp(lam: np.ndarray, H: float, tau: float) -> np.ndarray:
    """Multiprecision Cholesky, escalating precision until pivots resolve."""
    dim = lam.size + 2
    last_bad = None
    for dps in (60, 120, 240, 480):
        old = mp.mp.dps
        mp.mp.dps = dps
        try:
            S = _sigma_mp(lam, H, tau)
            L = mp.zeros(dim)
            max_diag = max(S[i, i] for i in range(dim))
            floor = mp.mpf(10) ** (-(dps - 10)) * max_diag
            ok = True
            for i in range(dim):
                for j in range(i + 1):
                    acc = S[i, j]
                    for k in range(j):
                        acc -= L[i, k] * L[j, k]
                    if i == j:
                        if acc <= floor:
                            ok = False
                            last_bad = (i, float(acc))
                            break
                        L[i, i] = mp.sqrt(acc)
                    else:
                        L[i, j] = acc / L[j, j]
                if not ok:
                    break
            if ok:
                return np.array(
                    [[float(L[i, j]) for j in range(dim)] for i in range(dim)]
                )
        finally:
            mp.mp.dps = old
    idx, piv = last_bad
    raise CovarianceError(
        f"driver covariance is not positive definite: pivot {piv:.3g} at index {idx}"
    )


def _stream(seed: int, role: int, block: int, step: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=(int(seed), role, int(block), int(step)))
    return np.random.Generator(np.random.Philox(ss))


def _blocks(count: int):
    start = 0
    b = 0
    while start < count:
        yield b, start, min(start + BLOCK_PATHS, count)
        b += 1
        start += BLOCK_PATHS


def _run_blocks(fn, count: int, threads: int = 1):
    jobs = list(_blocks(count))
    if threads <= 1 or len(jobs) <= 1:
        for job in jobs:
            fn(*job)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda j: fn(*j), jobs))


def sample_theta(cov: ThetaCovariance, count: int, rng_seed: int, threads: int = 1) -> np.ndarray:
    """Draw `count` driver vectors; deterministic in (seed, count)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out = np.empty((count, cov.dim))
    draw_dim = cov.chol.shape[0]

    def work(block, lo, hi):
        z = _stream(rng_seed, _ROLE_THETA, block).standard_normal((draw_dim, hi - lo))
        theta = (cov.chol @ z).T
        out[lo:hi] = _expand_zero_rate(theta) if cov.zero_rate else theta

    _run_blocks(work, count, threads)
    return out


@dataclass(frozen=True)
class VolterraPath:
    """Batch of Volterra trajectories with their Brownian increments.

    i_values[:, k] holds I(t_{k+1}) and dw[:, k] holds W(t_{k+1}) - W(t_k);
    the process starts from I(t_0) = 0 which is not stored.
    """

    i_values: np.ndarray
    dw: np.ndarray
    tau: float
    H: float

    @property
    def n_steps(self) -> int:
        return self.i_values.shape[1]

    @property
    def t_grid(self) -> np.ndarray:
        return self.tau * np.arange(1, self.n_steps + 1)


def volterra_path_msoe(
    soe: SoeApprox,
    cov: ThetaCovariance,
    n: int,
    rng_seed: int,
    count: int = 1,
    threads: int = 1,
    _block_offset: int = 0,
) -> VolterraPath:
    """Simulate I(t_i) by the exponential-factor recursion, O(N n) per path."""
    if n < 1:
        raise ValueError("n must be >= 1")
    N = soe.lam.size
    if cov.n_soe != N:
        raise ValueError("covariance was built for a different SOE size")
    i_out = np.empty((count, n))
    dw_out = np.empty((count, n))
    decay = np.exp(-soe.lam * cov.tau)
    w_hist = np.sqrt(2.0 * soe.H) * soe.omega

    draw_dim = cov.chol.shape[0]

    def work(block, lo, hi):
        m = hi - lo
        hist = np.zeros((m, N))
        theta_prev = None
        for i in range(1, n + 1):
            z = _stream(rng_seed, _ROLE_THETA, block + _block_offset, i).standard_normal(
                (draw_dim, m)
            )
            theta = (cov.chol @ z).T
            if cov.zero_rate:
                theta = _expand_zero_rate(theta)
            if i > 1:
                hist += theta_prev[:, 1 : N + 1]
                hist *= decay
            dw_out[lo:hi, i - 1] = theta[:, 0]
            i_out[lo:hi, i - 1] = hist @ w_hist + theta[:, N + 1]
            theta_prev = theta

    _run_blocks(work, count, threads)
    return VolterraPath(i_values=i_out, dw=dw_out, tau=cov.tau, H=soe.H)


# ---------------------------------------------------------------------------
# exact law


def volterra_cov_exact(t1: float, t2: float, H: float) -> float:
    """E[I_{t1} I_{t2}] = t1^(2H) C(t2/t1) with C evaluated by quadrature.

    After u = t1 - s the integrand is u^(H-1/2) (u + d)^(H-1/2) with
    d = t2 - t1; the endpoint singularity is absorbed by a Gauss-Jacobi
    panel and the rest is covered by geometric Legendre panels.
    """
    if not 0.0 < t1 <= t2:
        raise ValueError("need 0 < t1 <= t2")
    a = H - 0.5
    d = (t2 - t1) / t1  # work on the normalized interval [0, 1]
    if d == 0.0:
        return t1 ** (2.0 * H)
    total = 0.0
    m0 = min(d, 1.0)
    gj = gauss_jacobi(24, 0.0, a)
    u = m0 * (1.0 + gj.nodes) / 2.0
    w = gj.weights * (m0 / 2.0) ** (a + 1.0)
    total += float(np.sum(w * (u + d) ** a))
    lo = m0
    leg = gauss_legendre(16)
    while lo < 1.0:
        hi = min(4.0 * lo, 1.0)
        r = map_rule(leg, lo, hi)
        total += float(np.sum(r.weights * r.nodes**a * (r.nodes + d) ** a))
        lo = hi
    return t1 ** (2.0 * H) * 2.0 * H * total


def _cov_ii_grid(n: int, tau: float, H: float) -> np.ndarray:
    """Exact Cov(I_{t_i}, I_{t_j}) on the uniform grid, via shared panels.

    Cov(i, j) = 2H * sum_{m < i} int_{t_m}^{t_{m+1}} u^a (u + D)^a du with
    D = (j - i) tau, so one (panel, lag) table and a cumulative sum give
    every entry consistently.
    """
    a = H - 0.5
    D = np.arange(n) * tau
    P = np.empty((n, n))
    leg = gauss_legendre(12)
    for m in range(1, n):
        r = map_rule(leg, m * tau, (m + 1) * tau)
        P[m, :] = ((r.nodes[:, None] ** a) * (r.nodes[:, None] + D[None, :]) ** a
                   * r.weights[:, None]).sum(axis=0)
    gj = gauss_jacobi(24, 0.0, a)
    u0 = tau * (1.0 + gj.nodes) / 2.0
    w0 = gj.weights * (tau / 2.0) ** (a + 1.0)
    P[0, 1:] = ((u0[:, None] + D[None, 1:]) ** a * w0[:, None]).sum(axis=0)
    P[0, 0] = tau ** (2.0 * H) / (2.0 * H)
    cum = np.cumsum(P, axis=0)
    cov = np.empty((n, n))
    for i in range(1, n + 1):
        lags = np.arange(0, n - i + 1)
        cov[i - 1, i - 1 :] = 2.0 * H * cum[i - 1, lags]
        cov[i - 1 :, i - 1] = cov[i - 1, i - 1 :]
    return cov


def cov_volterra_brownian(t_i: float, t_j: float, H: float) -> float:
    """E[I_{t_i} W_{t_j}] from the Wiener-integral representation."""
    c = np.sqrt(2.0 * H) / (H + 0.5)
    overlap = min(t_i, t_j)
    return c * (t_i ** (H + 0.5) - (t_i - overlap) ** (H + 0.5))


def exact_joint_factor(H: float, n: int, tau: float) -> np.ndarray:
    """Cholesky factor of the joint law of (I_{t_1..n}, dW_{1..n}).

    Increments rather than levels of W are used on the Brownian side,
    which keeps the 2n x 2n matrix comfortably positive definite in
    float64; the law is identical.
    """
    if n > EXACT_STEP_CAP:
        raise ValueError(f"exact factorization capped at n={EXACT_STEP_CAP}")
    t = np.arange(1, n + 1) * tau
    cov_ii = _cov_ii_grid(n, tau, H)
    c = np.sqrt(2.0 * H) / (H + 0.5)
    ti = t[:, None]
    tj = t[None, :]
    cov_idw = np.where(
        tj <= ti,
        c * (np.maximum(ti - tj + tau, 0.0) ** (H + 0.5)
             - np.maximum(ti - tj, 0.0) ** (H + 0.5)),
        0.0,
    )
    cov = np.block([[cov_ii, cov_idw], [cov_idw.T, tau * np.eye(n)]])
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise CovarianceError(f"exact joint covariance not PD at n={n}") from exc


def volterra_path_exact(
    H: float,
    n: int,
    tau: float,
    rng_seed: int,
    count: int = 1,
    threads: int = 1,
    _factor: np.ndarray | None = None,
    _block_offset: int = 0,
) -> VolterraPath:
    """Sample (I, dW) jointly from the exact Gaussian law."""
    if n < 1:
        raise ValueError("n must be >= 1")
    L = exact_joint_factor(H, n, tau) if _factor is None else _factor
    i_out = np.empty((count, n))
    dw_out = np.empty((count, n))

    def work(block, lo, hi):
        z = _stream(rng_seed, _ROLE_EXACT, block + _block_offset).standard_normal(
            (2 * n, hi - lo)
        )
        joint = (L @ z).T
        i_out[lo:hi] = joint[:, :n]
        dw_out[lo:hi] = joint[:, n:]

    _run_blocks(work, count, threads)
    return VolterraPath(i_values=i_out, dw=dw_out, tau=tau, H=H)


def perp_increments(
    n: int, rng_seed: int, count: int, tau: float, threads: int = 1, _block_offset: int = 0
) -> np.ndarray:
    """Independent Brownian increments for the orthogonal price driver."""
    out = np.empty((count, n))
    root_tau = np.sqrt(tau)

    def work(block, lo, hi):
        m = hi - lo
        for i in range(1, n + 1):
            z = _stream(rng_seed, _ROLE_PERP, block + _block_offset, i).standard_normal(m)
            out[lo:hi, i - 1] = root_tau * z

    _run_blocks(work, count, threads)
    return out


def generic_normals(shape: tuple[int, ...], rng_seed: int, stream_tag: int) -> np.ndarray:
    """One-shot normal draws on an auxiliary stream (curves, training)."""
    return _stream(rng_seed, _ROLE_GENERIC, stream_tag).standard_normal(shape)


def write_paths_csv(paths: VolterraPath, path) -> None:
    """Stream a batch as ``path_id,step,t,I,dW`` rows."""
    t = paths.t_grid
    with open(path, "w") as fh:
        fh.write("path_id,step,t,I,dW\n")
        for p in range(paths.i_values.shape[0]):
            for k in range(paths.n_steps):
                fh.write(
                    f"{p},{k + 1},{t[k]:.17g},"
                    f"{paths.i_values[p, k]:.17g},{paths.dw[p, k]:.17g}\n"
                )


def write_paths_binary(paths: VolterraPath, path) -> None:
    """Row-major little-endian float64 dump: I block then dW block."""
    with open(path, "wb") as fh:
        fh.write(paths.i_values.astype("<f8").tobytes())
        fh.write(paths.dw.astype("<f8").tobytes())
