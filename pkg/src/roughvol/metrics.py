"""Empirical Wasserstein distances between equal-size 1-D samples."""
from __future__ import annotations

import numpy as np


def wasserstein_p(x, y, p: float = 1.0) -> float:
    """W_p between two empirical measures with matched sample counts.

    Sorts both samples and averages |X_(i) - Y_(i)|^p over the matched
    order statistics; this is the exact optimal-transport distance for
    equal-size empirical measures on the line.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size:
        raise ValueError(f"sample counts differ: {x.size} vs {y.size}")
    if x.size == 0:
        raise ValueError("need at least one sample")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("samples must be finite")
    if p < 1.0:
        raise ValueError("p must be >= 1")
    diff = np.abs(np.sort(x, kind="stable") - np.sort(y, kind="stable"))
    if p == 1.0:
        return float(np.mean(diff))
    return float(np.mean(diff**p) ** (1.0 / p))
