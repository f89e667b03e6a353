"""Kernel two-sample statistics used as the sample-quality proxy."""

from __future__ import annotations

import numpy as np


def _sq_dists(a, b):
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    d = aa + bb - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def median_bandwidth(a, b) -> float:
    """Median pairwise distance of the pooled sample (distinct pairs)."""
    pooled = np.concatenate([a, b], axis=0)
    d = _sq_dists(pooled, pooled)
    off = d[np.triu_indices(len(pooled), k=1)]
    med = float(np.median(np.sqrt(off)))
    return med if med > 0 else 1.0


def mmd(a: np.ndarray, b: np.ndarray, bandwidth: float = None) -> float:
    """Unbiased squared-MMD estimate with an RBF kernel.

    Bandwidth defaults to the median heuristic on the pooled sample.  The
    unbiased estimator can go slightly negative for matching
    distributions; the sign is left as is.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("mmd needs non-empty sample sets")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    m, n = len(a), len(b)
    if m < 2 or n < 2:
        raise ValueError("unbiased mmd needs at least 2 points per set")
    bw = median_bandwidth(a, b) if bandwidth is None else float(bandwidth)
    g = 1.0 / (2.0 * bw * bw)
    kaa = np.exp(-g * _sq_dists(a, a))
    kbb = np.exp(-g * _sq_dists(b, b))
    kab = np.exp(-g * _sq_dists(a, b))
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(term_a + term_b - 2.0 * kab.mean())
