"""Knockoff quality diagnostics: per-variable two-sample KS statistics and the
full-swap maximum mean discrepancy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .exceptions import DomainError


def ks_two_sample(a, b) -> float:
    """Sup distance between the empirical cdfs of two samples."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise DomainError("both samples must be nonempty")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def _split_swap(x, xt, seed):
    n = x.shape[0]
    idx = np.arange(n)
    if seed is not None:
        idx = np.random.default_rng(seed).permutation(n)
    g1, g2 = idx[0::2], idx[1::2]
    z1 = np.hstack([x[g1], xt[g1]])
    z2 = np.hstack([xt[g2], x[g2]])
    return z1, z2


def _standardize_pooled(z1, z2):
    pooled = np.vstack([z1, z2])
    mu = pooled.mean(axis=0)
    sd = pooled.std(axis=0)
    sd = np.where(sd > 0.0, sd, 1.0)
    return (z1 - mu) / sd, (z2 - mu) / sd


def median_bandwidth(z) -> float:
    """Median pairwise Euclidean distance (Gaussian RBF median heuristic)."""
    d = pdist(np.asarray(z, dtype=float))
    med = float(np.median(d[d > 0.0])) if np.any(d > 0.0) else 1.0
    return med if med > 0.0 else 1.0


def mmd_unbiased(z1, z2, bandwidth) -> float:
    """Unbiased squared-MMD estimate with a Gaussian RBF kernel (may be
    negative under the null; that is the documented sign convention)."""
    m, n = z1.shape[0], z2.shape[0]
    if m < 2 or n < 2:
        raise DomainError("need at least two rows per group")
    s2 = 2.0 * bandwidth**2
    k11 = np.exp(-cdist(z1, z1, "sqeuclidean") / s2)
    k22 = np.exp(-cdist(z2, z2, "sqeuclidean") / s2)
    k12 = np.exp(-cdist(z1, z2, "sqeuclidean") / s2)
    t11 = (k11.sum() - np.trace(k11)) / (m * (m - 1))
    t22 = (k22.sum() - np.trace(k22)) / (n * (n - 1))
    return float(t11 + t22 - 2.0 * k12.mean())


def mmd_full_swap(x, xt, seed=None) -> float:
    """Full-swap MMD between (X, X-tilde) and (X-tilde, X) halves.

    Rows are split into two parity groups (optionally after a seeded
    permutation); columns are standardized on the pooled sample and the
    kernel bandwidth is the pooled median pairwise distance.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xt = np.atleast_2d(np.asarray(xt, dtype=float))
    if x.shape != xt.shape:
        raise DomainError("x and the knockoffs must have identical shape")
    if x.shape[0] < 4:
        raise DomainError("need at least 4 rows for the split MMD")
    z1, z2 = _split_swap(x, xt, seed)
    z1, z2 = _standardize_pooled(z1, z2)
    bw = median_bandwidth(np.vstack([z1, z2]))
    return mmd_unbiased(z1, z2, bw)


@dataclass(frozen=True)
class DiagnosticsReport:
    """Per-variable KS statistics, their average, and the full-swap MMD."""

    ks_per_variable: np.ndarray
    ks_average: float
    mmd_full_swap: float
    mmd_bandwidth: float
    mmd_estimator: str = "unbiased"


def diagnostics_report(x, xt, seed=None) -> DiagnosticsReport:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xt = np.atleast_2d(np.asarray(xt, dtype=float))
    ks = np.array([ks_two_sample(x[:, i], xt[:, i]) for i in range(x.shape[1])])
    z1, z2 = _split_swap(x, xt, seed)
    z1, z2 = _standardize_pooled(z1, z2)
    bw = median_bandwidth(np.vstack([z1, z2]))
    return DiagnosticsReport(
        ks_per_variable=ks,
        ks_average=float(ks.mean()),
        mmd_full_swap=mmd_unbiased(z1, z2, bw),
        mmd_bandwidth=bw,
    )
