import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from roughvol.quadrature import (
    GaussRule,
    QuadratureError,
    gauss_jacobi,
    gauss_legendre,
    gauss_wrt_weight,
    map_rule,
    write_rule_csv,
)


def test_legendre_one_point_is_midpoint():
    r = gauss_legendre(1)
    assert r.nodes == pytest.approx([0.0], abs=1e-15)
    assert r.weights == pytest.approx([2.0], abs=1e-15)


def test_legendre_two_point_classical():
    r = gauss_legendre(2)
    assert r.nodes == pytest.approx([-1 / np.sqrt(3), 1 / np.sqrt(3)], abs=1e-15)
    assert r.weights == pytest.approx([1.0, 1.0], abs=1e-14)


def test_legendre_five_point_x8():
    # exact antiderivative: int_{-1}^{1} x^8 dx = 2/9
    r = gauss_legendre(5)
    val = r.integrate(lambda x: x**8)
    assert val == pytest.approx(2.0 / 9.0, rel=1e-13)


def test_jacobi_zero_exponents_reduces_to_legendre():
    rj = gauss_jacobi(7, 0.0, 0.0)
    rl = gauss_legendre(7)
    np.testing.assert_allclose(rj.nodes, rl.nodes, atol=1e-14)
    np.testing.assert_allclose(rj.weights, rl.weights, atol=1e-14)


def test_jacobi_one_point_closed_form():
    # single node at the weighted centroid of (1+x)^beta, weight = total mass
    beta = -0.57
    r = gauss_jacobi(1, 0.0, beta)
    assert r.nodes[0] == pytest.approx(beta / (beta + 2.0), rel=1e-13)
    assert r.weights[0] == pytest.approx(2.0 ** (beta + 1.0) / (beta + 1.0), rel=1e-13)


def test_jacobi_eight_point_vs_adaptive_quadrature():
    beta = -0.57
    r = gauss_jacobi(8, 0.0, beta)
    val = r.integrate(lambda x: x**4)
    ref, err = quad(lambda x: x**4, -1.0, 1.0, weight="alg", wvar=(beta, 0.0))
    assert err < 1e-12
    assert val == pytest.approx(ref, rel=1e-10)


def test_map_rule_identity():
    r = gauss_legendre(4)
    m = map_rule(r, -1.0, 1.0)
    np.testing.assert_array_equal(m.nodes, r.nodes)
    np.testing.assert_array_equal(m.weights, r.weights)


def test_map_rule_unit_interval():
    m = map_rule(gauss_legendre(2), 0.0, 1.0)
    expected = [(1 - 1 / np.sqrt(3)) / 2, (1 + 1 / np.sqrt(3)) / 2]
    np.testing.assert_allclose(m.nodes, expected, atol=1e-15)
    np.testing.assert_allclose(m.weights, [0.5, 0.5], atol=1e-15)


@pytest.mark.parametrize("zeta", [0.3, 1.0, 2.5])
def test_map_rule_power_weight_moment(zeta):
    # integral of 1 against x^{-0.57} over [0, zeta] is zeta^{0.43} / 0.43
    beta = -0.57
    r = map_rule(gauss_jacobi(6, 0.0, beta), 0.0, zeta)
    assert r.integrate(lambda x: np.ones_like(x)) == pytest.approx(
        zeta**0.43 / 0.43, rel=1e-12
    )


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(1, 12),
    coeffs=st.lists(st.floats(-3.0, 3.0), min_size=1, max_size=23),
)
def test_polynomial_exactness(n, coeffs):
    deg = min(len(coeffs) - 1, 2 * n - 1)
    c = np.asarray(coeffs[: deg + 1])
    r = gauss_legendre(n)
    val = r.integrate(lambda x: np.polynomial.polynomial.polyval(x, c))
    # exact integral of sum c_k x^k over [-1, 1]
    k = np.arange(deg + 1)
    exact = np.sum(c * ((1.0 - (-1.0) ** (k + 1)) / (k + 1)))
    assert val == pytest.approx(exact, rel=1e-12, abs=1e-12)


@settings(max_examples=15, deadline=None)
@given(n=st.integers(1, 12), beta=st.floats(-0.9, 1.5))
def test_jacobi_moment_exactness(n, beta):
    # with u = (1+x)/2: int u^k (1+x)^beta dx = 2^{beta+1} / (k + beta + 1)
    r = gauss_jacobi(n, 0.0, beta)
    for k in range(min(2 * n, 6)):
        val = r.integrate(lambda x: ((1.0 + x) / 2.0) ** k)
        assert val == pytest.approx(2.0 ** (beta + 1.0) / (k + beta + 1.0), rel=1e-11)


def test_node_interlacing_and_weight_positivity():
    prev = gauss_legendre(1)
    for n in range(2, 33):
        cur = gauss_legendre(n)
        assert np.all(cur.weights > 0)
        # nodes of rule n-1 interlace those of rule n
        for i, x in enumerate(prev.nodes):
            assert cur.nodes[i] < x < cur.nodes[i + 1]
        prev = cur


@settings(max_examples=25, deadline=None)
@given(
    a=st.floats(-4.0, 4.0),
    width=st.floats(0.1, 5.0),
    c2=st.floats(-2.0, 2.0),
)
def test_affine_map_consistency(a, width, c2):
    b = a + width
    f = lambda x: np.cos(c2 * x) + x**2
    r = gauss_legendre(12)
    mapped = map_rule(r, a, b)
    direct = mapped.integrate(f)
    pulled = r.integrate(lambda x: f(a + (b - a) * (x + 1) / 2) * (b - a) / 2)
    assert direct == pytest.approx(pulled, rel=1e-12, abs=1e-12)


def test_gauss_wrt_weight_power_law():
    # Stieltjes construction against an adaptive-quadrature reference
    beta = -0.57
    gen = gauss_wrt_weight(8, 1.0, 2.0, lambda x: x**beta)
    val_gen = gen.integrate(lambda x: np.exp(-x))
    ref_val, _ = quad(lambda x: np.exp(-x) * x**beta, 1.0, 2.0, epsabs=1e-13)
    assert val_gen == pytest.approx(ref_val, rel=1e-9)
    # low moments are matched exactly by construction
    for k in range(4):
        ref_m, _ = quad(lambda x: x**k * x**beta, 1.0, 2.0, epsabs=1e-13)
        assert gen.integrate(lambda x: x**k) == pytest.approx(ref_m, rel=1e-12)


def test_invalid_arguments():
    with pytest.raises(QuadratureError):
        gauss_legendre(0)
    with pytest.raises(QuadratureError):
        gauss_jacobi(3, -1.0, 0.0)
    with pytest.raises(QuadratureError):
        map_rule(gauss_legendre(2), 1.0, 1.0)


def test_rule_csv_dump(tmp_path):
    r = gauss_legendre(3)
    out = tmp_path / "rule.csv"
    write_rule_csv(r, out)
    lines = out.read_text().splitlines()
    assert lines[0] == "node,weight"
    assert len(lines) == 4
    node, weight = map(float, lines[1].split(","))
    assert node == pytest.approx(r.nodes[0], rel=1e-16)
