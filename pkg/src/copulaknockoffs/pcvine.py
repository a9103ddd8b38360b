"""Partial correlation D-vines and the Gaussian knockoff matrix algebra.

Contains the bijection between a correlation matrix R and the D-vine partial
correlation matrix P (entries rho_{j,i; j+1:i-1}), the determinant product
identity, the equicorrelated knockoff decorrelation vector, the 2d-by-2d
joint matrix H for (U, U-tilde), and the conditional Gaussian law used by
plain Gaussian knockoffs.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .exceptions import DomainError, NumericError

# partial correlations of a singular-but-PSD H sit on the boundary; they are
# pulled inside the open interval by this margin before use as copula parameters
PCORR_CLIP = 1.0 - 1e-7
PSD_TOL = 1e-8


def validate_corr(r, name: str = "R") -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise DomainError(f"{name} must be square")
    if not np.allclose(r, r.T, atol=1e-10):
        raise DomainError(f"{name} must be symmetric")
    if not np.allclose(np.diag(r), 1.0, atol=1e-10):
        raise DomainError(f"{name} must have unit diagonal")
    return r


def corr_to_pcorr(r) -> np.ndarray:
    """D-vine partial correlations from a correlation matrix.

    Entry (j, i) of the result is the partial correlation of variables j and
    i given the in-between block j+1..i-1, i.e. the precision-matrix formula
    for the contiguous block R[j..i, j..i], evaluated in regression form
    through a Cholesky factor of the in-between block.  The in-between block
    stays positive definite even when the full block is only semidefinite
    (knockoff H with a binding equicorrelated bound), in which case the
    partial sits on the boundary and is pulled just inside (-1, 1).
    Returned as a full symmetric matrix with unit diagonal.
    """
    r = validate_corr(r)
    d = r.shape[0]
    p = np.eye(d)
    for j in range(d - 1):
        p[j, j + 1] = p[j + 1, j] = r[j, j + 1]
    for lag in range(2, d):
        for j in range(d - lag):
            i = j + lag
            mid = slice(j + 1, i)
            try:
                factor = cho_factor(r[mid, mid], check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise NumericError(
                    f"singular block for partial correlation ({j}, {i})") from exc
            b_j = cho_solve(factor, r[mid, j], check_finite=False)
            b_i = cho_solve(factor, r[mid, i], check_finite=False)
            var_j = max(1.0 - r[j, mid] @ b_j, 0.0)
            var_i = max(1.0 - r[i, mid] @ b_i, 0.0)
            cov = r[j, i] - r[j, mid] @ b_i
            denom = np.sqrt(var_j * var_i)
            if denom < 1e-300:
                val = np.sign(cov) if cov != 0.0 else 0.0
            else:
                val = cov / denom
            p[j, i] = p[i, j] = np.clip(val, -PCORR_CLIP, PCORR_CLIP)
    return p


def pcorr_to_corr(p) -> np.ndarray:
    """Correlation matrix whose D-vine partial correlations equal ``p``.

    Inverts the partial correlation relation off-diagonal by off-diagonal:
    for each pair (j, i) the defining identity
    ``p_ji = (r_ji - b) / sqrt((1 - q_j)(1 - q_i))`` is solved for ``r_ji``,
    where b, q_j, q_i are regression terms of the in-between block, all of
    which involve only shorter lags.  Any input with entries in (-1, 1)
    yields a positive definite matrix.
    """
    p = np.asarray(p, dtype=float)
    d = p.shape[0]
    off = p[~np.eye(d, dtype=bool)]
    if np.any(np.abs(off) >= 1.0):
        raise DomainError("partial correlations must lie strictly inside (-1, 1)")
    r = np.eye(d)
    for j in range(d - 1):
        r[j, j + 1] = r[j + 1, j] = p[j, j + 1]
    for lag in range(2, d):
        for j in range(d - lag):
            i = j + lag
            mid = slice(j + 1, i)
            block = r[mid, mid]
            factor = cho_factor(block, check_finite=False)
            b1 = cho_solve(factor, r[mid, j], check_finite=False)
            b2 = cho_solve(factor, r[mid, i], check_finite=False)
            var_j = 1.0 - r[j, mid] @ b1
            var_i = 1.0 - r[i, mid] @ b2
            val = p[j, i] * np.sqrt(max(var_j, 0.0) * max(var_i, 0.0)) + r[j, mid] @ b2
            r[j, i] = r[i, j] = val
    return r


def det_from_pcorr(p) -> float:
    """det(R) as the product of (1 - rho^2) over all vine edges."""
    p = np.asarray(p, dtype=float)
    iu = np.triu_indices(p.shape[0], k=1)
    return float(np.prod(1.0 - p[iu] ** 2))


def knockoff_s_vector(r) -> np.ndarray:
    """Equicorrelated knockoff decorrelation vector s_j = min(2 lambda_min, 1)."""
    r = validate_corr(r)
    lam_min = float(np.linalg.eigvalsh(r)[0])
    if lam_min <= 0.0:
        raise DomainError(f"correlation matrix is not positive definite "
                          f"(lambda_min = {lam_min:.3e})")
    return np.full(r.shape[0], min(2.0 * lam_min, 1.0))


def build_H(r, s) -> np.ndarray:
    """Joint 2d correlation matrix [[R, R - diag(s)], [R - diag(s), R]]."""
    r = validate_corr(r)
    s = np.asarray(s, dtype=float)
    if s.shape != (r.shape[0],):
        raise DomainError("s must be a vector of length d")
    cross = r - np.diag(s)
    h = np.block([[r, cross], [cross, r]])
    lam_min = float(np.linalg.eigvalsh(h)[0])
    if lam_min < -PSD_TOL:
        raise NumericError(f"H is not positive semidefinite (lambda_min = {lam_min:.3e})")
    return h


def conditional_gaussian(sigma, s, x):
    """Mean and covariance of the Gaussian knockoff conditional distribution.

    For each row x of the input, mu = x - diag(s) Sigma^{-1} x and
    V = 2 diag(s) - diag(s) Sigma^{-1} diag(s).  Sigma may be a covariance
    matrix; s must then be on the same (covariance) scale.
    """
    sigma = np.asarray(sigma, dtype=float)
    s = np.asarray(s, dtype=float)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = sigma.shape[0]
    try:
        factor = cho_factor(sigma, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError("Sigma is not positive definite") from exc
    sigma_inv_ds = cho_solve(factor, np.diag(s), check_finite=False)
    mu = x - x @ sigma_inv_ds  # x Sigma^{-1} diag(s); symmetric Sigma
    v = 2.0 * np.diag(s) - np.diag(s) @ sigma_inv_ds
    v = 0.5 * (v + v.T)
    lam = np.linalg.eigvalsh(v)
    if lam[0] < -PSD_TOL:
        raise NumericError(f"conditional covariance indefinite (lambda_min = {lam[0]:.3e})")
    return mu, v


def psd_sqrt(v) -> np.ndarray:
    """Symmetric square root with eigenvalues in [-1e-8, 0) clipped to 0."""
    v = np.asarray(v, dtype=float)
    lam, vec = np.linalg.eigh(v)
    if lam[0] < -PSD_TOL:
        raise NumericError(f"matrix indefinite (lambda_min = {lam[0]:.3e})")
    return vec * np.sqrt(np.clip(lam, 0.0, None))


def nearest_corr(r, eig_floor: float = 1e-6) -> np.ndarray:
    """Project a symmetric matrix to a positive definite correlation matrix.

    Eigenvalues are clipped from below and the diagonal is rescaled to one;
    used for tau-inversion estimates that may be slightly indefinite.
    """
    r = np.asarray(r, dtype=float)
    r = 0.5 * (r + r.T)
    lam, vec = np.linalg.eigh(r)
    if lam[0] < eig_floor:
        r = (vec * np.clip(lam, eig_floor, None)) @ vec.T
        dd = np.sqrt(np.diag(r))
        r = r / np.outer(dd, dd)
        np.fill_diagonal(r, 1.0)
        r = 0.5 * (r + r.T)
    return r
