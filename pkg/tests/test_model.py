import numpy as np
import pytest

from roughvol.kernel import build_soe_approach_b
from roughvol.model import (
    ForwardVarianceCurve,
    RBergomiParams,
    SimulationError,
    make_curve_abs_bm,
    make_curve_abs_fbm,
    make_curve_constant,
    simulate_paths,
    write_price_paths_csv,
)


@pytest.fixture(scope="module")
def params_small():
    return RBergomiParams(n_steps=64, t_horizon=1.0)


@pytest.fixture(scope="module")
def soe_small(params_small):
    return build_soe_approach_b(
        0.07, eps=8e-4, t1=params_small.tau, horizon=params_small.t_horizon
    )


def test_params_validation():
    with pytest.raises(ValueError):
        RBergomiParams(s0=-1.0)
    with pytest.raises(ValueError):
        RBergomiParams(hurst=0.6)
    with pytest.raises(ValueError):
        RBergomiParams(rho=0.5)
    with pytest.raises(ValueError):
        RBergomiParams(n_steps=0)


def test_constant_curve():
    c = make_curve_constant(0.235**2)
    assert c(0.4)[0] == pytest.approx(0.055225, abs=1e-15)
    zero = make_curve_constant(0.0)
    assert np.all(zero(np.linspace(0, 1, 5)) == 0.0)
    one = make_curve_constant(1.0)
    assert np.all(one(np.linspace(0, 3, 7)) == 1.0)
    with pytest.raises(ValueError):
        make_curve_constant(-0.1)


def test_abs_bm_curve_basics():
    grid = np.linspace(0.0, 1.0, 65)
    c = make_curve_abs_bm(2.0, grid, seed=4)
    assert c(0.0)[0] == 0.0
    assert np.all(c(grid) >= 0.0)
    again = make_curve_abs_bm(2.0, grid, seed=4)
    np.testing.assert_array_equal(c.values, again.values)
    other = make_curve_abs_bm(2.0, grid, seed=5)
    assert not np.array_equal(c.values, other.values)


def test_abs_bm_curve_mean_over_seeds():
    # E|W_t| = sqrt(2 t / pi), so the curve mean at t is scale times that
    grid = np.linspace(0.0, 1.0, 9)
    t_idx = 8  # t = 1
    vals = np.array(
        [make_curve_abs_bm(2.0, grid, seed=s).values[t_idx] for s in range(4000)]
    )
    assert vals.mean() == pytest.approx(2.0 * np.sqrt(2.0 / np.pi), rel=0.05)


def test_abs_fbm_curve_variance_over_seeds():
    grid = np.linspace(0.0, 1.0, 17)
    h = 0.07
    vals = np.array(
        [make_curve_abs_fbm(1.0, h, grid, seed=s).values[-1] for s in range(10_000)]
    )
    # underlying fBM has Var(W^H_1) = 1; |N(0,1)| has E X^2 = 1
    assert np.mean(vals**2) == pytest.approx(1.0, rel=0.05)
    assert make_curve_abs_fbm(1.0, h, grid, seed=0)(0.0)[0] == 0.0


def test_abs_fbm_half_matches_bm_law():
    # H = 1/2 reduces the autocovariance to min(s, t)
    grid = np.linspace(0.0, 1.0, 33)
    vals = np.array(
        [make_curve_abs_fbm(1.0, 0.5, grid, seed=s).values[-1] for s in range(6000)]
    )
    assert np.mean(vals**2) == pytest.approx(1.0, rel=0.06)


def test_neural_curve_wrapper_positive():
    c = ForwardVarianceCurve(kind="neural", handle=lambda t: np.full_like(t, 0.04))
    assert np.all(c(np.linspace(0, 1, 5)) == 0.04)
    bad = ForwardVarianceCurve(kind="neural", handle=lambda t: t - 0.5)
    with pytest.raises(ValueError, match="nonnegative"):
        bad(np.linspace(0.0, 1.0, 3))


def test_simulate_eta_zero_collapses_variance(params_small, soe_small):
    params = RBergomiParams(eta=0.0, n_steps=32)
    curve = make_curve_constant(0.04)
    batch = simulate_paths(params, curve, "msoe", 4000, seed=9, soe=soe_small, store="full")
    np.testing.assert_allclose(batch.v, 0.04, rtol=1e-15)
    se = batch.terminal.std() / np.sqrt(batch.n_paths)
    assert abs(batch.terminal.mean() - 1.0) < 3 * se


def test_simulate_martingale_both_schemes(params_small, soe_small):
    curve = make_curve_constant(0.235**2)
    for scheme in ("msoe", "exact"):
        batch = simulate_paths(
            params_small, curve, scheme, 20_000, seed=13,
            soe=soe_small if scheme == "msoe" else None,
        )
        se = batch.terminal.std() / np.sqrt(batch.n_paths)
        assert abs(batch.terminal.mean() - 1.0) < 3 * se


def test_simulate_variance_marginals(params_small, soe_small):
    curve = make_curve_constant(0.235**2)
    batch = simulate_paths(params_small, curve, "msoe", 40_000, seed=17, soe=soe_small)
    # E[V_t] = xi0(t); allow 3 standard errors entrywise
    gap = np.abs(batch.v_mean - 0.055225)
    assert np.all(gap <= 3.5 * batch.v_se)


def test_simulate_negative_correlation(params_small, soe_small):
    curve = make_curve_constant(0.235**2)
    params = RBergomiParams(n_steps=16)
    soe = build_soe_approach_b(0.07, eps=8e-4, t1=params.tau, horizon=1.0)
    batch = simulate_paths(params, curve, "msoe", 30_000, seed=19, soe=soe, store="full")
    log_ret = np.log(batch.s[:, -1] / batch.s[:, 0])
    # spot/vol correlation is negative under rho < 0
    v_change = batch.v[:, -1] - batch.v[:, 0]
    corr = np.corrcoef(log_ret, v_change)[0, 1]
    assert corr < -0.1


def test_simulate_positivity_and_finiteness(params_small, soe_small):
    curve = make_curve_constant(0.235**2)
    batch = simulate_paths(params_small, curve, "msoe", 16_000, seed=23, soe=soe_small, store="full")
    assert batch.s.size >= 1_000_000  # at least 1e6 path-steps exercised
    assert np.all(batch.s > 0.0)
    assert np.all(np.isfinite(batch.s))
    assert np.all(batch.v >= 0.0)
    assert np.all(np.isfinite(batch.v))


def test_simulate_deterministic_and_thread_independent(params_small, soe_small):
    curve = make_curve_constant(0.055225)
    a = simulate_paths(params_small, curve, "msoe", 9000, seed=29, soe=soe_small, threads=1)
    b = simulate_paths(params_small, curve, "msoe", 9000, seed=29, soe=soe_small, threads=4)
    np.testing.assert_array_equal(a.terminal, b.terminal)
    np.testing.assert_array_equal(a.v_mean, b.v_mean)
    c = simulate_paths(params_small, curve, "msoe", 9000, seed=30, soe=soe_small)
    assert not np.array_equal(a.terminal, c.terminal)


def test_simulate_zero_curve_degenerates():
    params = RBergomiParams(n_steps=8)
    soe = build_soe_approach_b(0.07, eps=1e-2, t1=params.tau, horizon=1.0)
    batch = simulate_paths(params, make_curve_constant(0.0), "msoe", 100, seed=1, soe=soe, store="full")
    np.testing.assert_array_equal(batch.v, 0.0)
    np.testing.assert_allclose(batch.terminal, 1.0, rtol=1e-15)


def test_simulate_rejects_bad_scheme(params_small):
    with pytest.raises(ValueError):
        simulate_paths(params_small, make_curve_constant(0.04), "hybrid", 10, seed=1)
    with pytest.raises(ValueError):
        simulate_paths(params_small, make_curve_constant(0.04), "msoe", 10, seed=1)


def test_price_paths_csv(tmp_path, soe_small):
    params = RBergomiParams(n_steps=4)
    soe = build_soe_approach_b(0.07, eps=1e-2, t1=params.tau, horizon=1.0)
    batch = simulate_paths(params, make_curve_constant(0.04), "msoe", 3, seed=2, soe=soe, store="full")
    out = tmp_path / "paths.csv"
    write_price_paths_csv(batch, out)
    lines = out.read_text().splitlines()
    assert lines[0] == "path_id,step,t,S,V"
    assert len(lines) == 1 + 3 * 4
