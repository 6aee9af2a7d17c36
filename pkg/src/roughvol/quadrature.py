"""Gauss-Legendre and Gauss-Jacobi quadrature rules.

Nodes and weights are computed from the symmetric tridiagonal eigenproblem
of the three-term recurrence (Golub-Welsch), using the closed-form
recurrence coefficients of the Jacobi polynomials.  The mildly singular
weights (1+x)^beta with beta in (-1, -1/2) that appear downstream are well
within the stable range of this approach.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.special import loggamma

MAX_REFINE_ITERS = 100
REFINE_TOL = 1e-14


class QuadratureError(RuntimeError):
    """Raised when a rule cannot be constructed."""


@dataclass(frozen=True)
class GaussRule:
    """A Gauss rule for the weight (b-x)^alpha (x-a)^beta on [a, b].

    ``sum(weights * f(nodes))`` approximates ``int_a^b f(x) w(x) dx`` and is
    exact for polynomials f of degree <= 2n-1.
    """

    nodes: np.ndarray
    weights: np.ndarray
    interval: tuple[float, float] = (-1.0, 1.0)
    weight_exponents: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.atleast_1d(np.asarray(self.nodes, dtype=float)))
        object.__setattr__(self, "weights", np.atleast_1d(np.asarray(self.weights, dtype=float)))
        a, b = self.interval
        if self.nodes.shape != self.weights.shape:
            raise QuadratureError("node/weight count mismatch")
        if np.any(np.diff(self.nodes) <= 0):
            raise QuadratureError("nodes must be strictly increasing")
        if np.any(self.nodes <= a) or np.any(self.nodes >= b):
            raise QuadratureError("nodes must lie strictly inside the interval")
        if np.any(self.weights <= 0):
            raise QuadratureError("weights must be positive")

    @property
    def n(self) -> int:
        return self.nodes.size

    def integrate(self, f) -> float:
        return float(np.sum(self.weights * f(self.nodes)))


def _jacobi_recurrence(n: int, alpha: float, beta: float):
    """Diagonal and off-diagonal of the Jacobi matrix for (1-x)^a (1+x)^b."""
    ab = alpha + beta
    d = np.zeros(n)
    e = np.zeros(max(n - 1, 0))
    for k in range(n):
        if k == 0:
            d[0] = (beta - alpha) / (ab + 2.0)
        else:
            den = (2.0 * k + ab) * (2.0 * k + ab + 2.0)
            d[k] = (beta * beta - alpha * alpha) / den
        if k < n - 1:
            m = k + 1
            num = 4.0 * m * (m + alpha) * (m + beta) * (m + ab)
            den = (2.0 * m + ab) ** 2 * (2.0 * m + ab + 1.0) * (2.0 * m + ab - 1.0)
            e[k] = np.sqrt(num / den)
    return d, e


def _jacobi_poly_and_deriv(n: int, alpha: float, beta: float, x: np.ndarray):
    """P_n^(alpha,beta)(x) and its derivative via the standard recurrence."""
    p_prev = np.ones_like(x)
    if n == 0:
        return p_prev, np.zeros_like(x)
    ab = alpha + beta
    p = 0.5 * (alpha - beta + (ab + 2.0) * x)
    for m in range(2, n + 1):
        c1 = 2.0 * m * (m + ab) * (2.0 * m + ab - 2.0)
        c2 = (2.0 * m + ab - 1.0) * (alpha * alpha - beta * beta)
        c3 = (2.0 * m + ab - 2.0) * (2.0 * m + ab - 1.0) * (2.0 * m + ab)
        c4 = 2.0 * (m + alpha - 1.0) * (m + beta - 1.0) * (2.0 * m + ab)
        p, p_prev = ((c2 + c3 * x) * p - c4 * p_prev) / c1, p
    # d/dx P_n = (n+ab+1)/2 * P_{n-1}^(alpha+1,beta+1)
    dp, _ = _jacobi_poly_and_deriv(n - 1, alpha + 1.0, beta + 1.0, x)
    return p, 0.5 * (n + ab + 1.0) * dp


def gauss_jacobi(n: int, alpha: float, beta: float) -> GaussRule:
    """n-point Gauss-Jacobi rule for (1-x)^alpha (1+x)^beta on [-1, 1].

    Parameters
    ----------
    n : int
        Number of nodes, n >= 1.
    alpha, beta : float
        Weight exponents, both > -1.

    Returns
    -------
    GaussRule
        Exact for polynomials of degree <= 2n-1 against the Jacobi weight.
    """
    if n < 1:
        raise QuadratureError(f"need n >= 1, got n={n}")
    if alpha <= -1.0 or beta <= -1.0:
        raise QuadratureError(f"weight exponents must exceed -1, got ({alpha}, {beta})")
    d, e = _jacobi_recurrence(n, alpha, beta)
    try:
        x, vec = eigh_tridiagonal(d, e)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise QuadratureError(f"eigensolver failed for n={n}") from exc
    mu0 = 2.0 ** (alpha + beta + 1.0) * np.exp(
        loggamma(alpha + 1.0) + loggamma(beta + 1.0) - loggamma(alpha + beta + 2.0)
    )
    w = mu0 * vec[0] ** 2
    x = _newton_refine(x, n, alpha, beta)
    return GaussRule(x, w, (-1.0, 1.0), (alpha, beta))


def _newton_refine(x: np.ndarray, n: int, alpha: float, beta: float) -> np.ndarray:
    """Polish eigenvalue nodes to the roots of P_n^(alpha,beta)."""
    x = x.copy()
    for _ in range(MAX_REFINE_ITERS):
        p, dp = _jacobi_poly_and_deriv(n, alpha, beta, x)
        step = np.where(dp != 0.0, p / np.where(dp != 0.0, dp, 1.0), 0.0)
        # keep the correction a polish, never a jump to another root
        step = np.clip(step, -1e-3, 1e-3)
        x = x - step
        if np.max(np.abs(step)) < REFINE_TOL:
            return x
    raise QuadratureError(f"node refinement did not converge for n={n}")


def gauss_legendre(n: int) -> GaussRule:
    """n-point Gauss-Legendre rule on [-1, 1] (unit weight)."""
    return gauss_jacobi(n, 0.0, 0.0)


def map_rule(rule: GaussRule, a: float, b: float) -> GaussRule:
    """Affine image of a rule on [a, b], preserving weighted integrals.

    The Jacobian and the rescaling of the weight function
    (b-x)^alpha (x-a)^beta are absorbed into the weights, so the mapped
    rule integrates f against the weight on [a, b] directly.
    """
    if not a < b:
        raise QuadratureError(f"need a < b, got [{a}, {b}]")
    a0, b0 = rule.interval
    if (a, b) == (a0, b0):
        return rule
    alpha, beta = rule.weight_exponents
    scale = (b - a) / (b0 - a0)
    nodes = a + (rule.nodes - a0) * scale
    weights = rule.weights * scale ** (1.0 + alpha + beta)
    return GaussRule(nodes, weights, (a, b), (alpha, beta))


def gauss_wrt_weight(n: int, a: float, b: float, weight_fn, n_discr: int = 256) -> GaussRule:
    """Gauss rule for a smooth positive weight on [a, b] via Stieltjes.

    Inner products are discretized with a dense Gauss-Legendre rule, the
    three-term recurrence is built by the Stieltjes procedure, and nodes
    and weights come out of the usual tridiagonal eigenproblem.  Intended
    for small n against weights without interior singularities.
    """
    if not a < b:
        raise QuadratureError(f"need a < b, got [{a}, {b}]")
    base = map_rule(gauss_legendre(n_discr), a, b)
    xx, ww = base.nodes, base.weights * weight_fn(base.nodes)
    if np.any(ww <= 0):
        raise QuadratureError("weight function must be positive on (a, b)")
    d = np.zeros(n)
    e = np.zeros(max(n - 1, 0))
    p_prev = np.zeros_like(xx)
    p = np.ones_like(xx)
    nrm = np.sum(ww)
    for k in range(n):
        d[k] = np.sum(ww * xx * p * p) / np.sum(ww * p * p)
        if k < n - 1:
            p_new = (xx - d[k]) * p - (e[k - 1] ** 2 if k > 0 else 0.0) * p_prev
            e[k] = np.sqrt(np.sum(ww * p_new * p_new) / np.sum(ww * p * p))
            p_prev, p = p, p_new
    x, vec = eigh_tridiagonal(d, e)
    w = nrm * vec[0] ** 2
    return GaussRule(x, w, (a, b), (0.0, 0.0))


def write_rule_csv(rule: GaussRule, path) -> None:
    """Dump a rule as ``node,weight`` rows with 17 significant digits."""
    with open(path, "w") as fh:
        fh.write("node,weight\n")
        for x, w in zip(rule.nodes, rule.weights):
            fh.write(f"{x:.17g},{w:.17g}\n")
