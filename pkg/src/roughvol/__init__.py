"""Rough Bergomi toolkit: mSOE kernels, Monte Carlo pricing, neural curves."""

from .kernel import (
    SoeApprox,
    build_soe_approach_a,
    build_soe_approach_b,
    kernel_eval,
    l2_error,
    modified_kernel_eval,
    soe_eval,
)
from .metrics import wasserstein_p
from .model import (
    ForwardVarianceCurve,
    PathBatch,
    RBergomiParams,
    make_curve_abs_bm,
    make_curve_abs_fbm,
    make_curve_constant,
    simulate_paths,
)
from .pricing import bs_price, implied_vol, price_european
from .sampler import (
    ThetaCovariance,
    build_covariance,
    sample_theta,
    volterra_cov_exact,
    volterra_path_exact,
    volterra_path_msoe,
)

__all__ = [
    "SoeApprox", "build_soe_approach_a", "build_soe_approach_b", "kernel_eval",
    "l2_error", "modified_kernel_eval", "soe_eval", "wasserstein_p",
    "ForwardVarianceCurve", "PathBatch", "RBergomiParams", "make_curve_abs_bm",
    "make_curve_abs_fbm", "make_curve_constant", "simulate_paths", "bs_price",
    "implied_vol", "price_european", "ThetaCovariance", "build_covariance",
    "sample_theta", "volterra_cov_exact", "volterra_path_exact", "volterra_path_msoe",
]

__version__ = "0.1.0"
