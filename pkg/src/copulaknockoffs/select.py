"""Controlled variable selection on the knockoff-augmented design.

Cross-validated Lasso (coordinate descent on the Gram matrix), antisymmetric
knockoff statistics W_i = |beta_i| - |beta_{d+i}|, the data-dependent
selection threshold, and FDP/power scoring.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .exceptions import DataError, DomainError, NumericError

MAX_SWEEPS = 100_000
CD_TOL = 1e-7


@njit(cache=True)
def _cd_gram_path(gram, xty, lams, beta_start, max_sweeps, tol):
    """Coordinate descent for 0.5/n ||y - X b||^2 + lam ||b||_1 along a
    descending lambda path, warm-started.  gram = X'X/n, xty = X'y/n.

    Maintains the gradient vector gram @ beta incrementally (updates cost
    O(p) only when a coordinate actually moves) and alternates active-set
    sweeps with full sweeps; convergence is declared only after a full sweep
    meets the tolerance, so the KKT conditions are verified everywhere.
    """
    p = gram.shape[0]
    betas = np.empty((lams.size, p))
    converged = np.zeros(lams.size, dtype=np.int64)
    beta = beta_start.copy()
    grad = np.zeros(p)  # gram @ beta
    active = np.zeros(p, dtype=np.bool_)
    for j in range(p):
        active[j] = beta[j] != 0.0
        if beta[j] != 0.0:
            for k in range(p):
                grad[k] += gram[k, j] * beta[j]
    for li in range(lams.size):
        lam = lams[li]
        full_pass = True
        for _ in range(max_sweeps):
            max_change = 0.0
            for j in range(p):
                if not full_pass and not active[j]:
                    continue
                gjj = gram[j, j]
                if gjj <= 0.0:
                    beta[j] = 0.0
                    active[j] = False
                    continue
                r = xty[j] - grad[j] + gjj * beta[j]
                old = beta[j]
                if r > lam:
                    new = (r - lam) / gjj
                elif r < -lam:
                    new = (r + lam) / gjj
                else:
                    new = 0.0
                delta = new - old
                if delta != 0.0:
                    beta[j] = new
                    for k in range(p):
                        grad[k] += gram[k, j] * delta
                active[j] = new != 0.0
                change = abs(delta)
                if change > max_change:
                    max_change = change
            if max_change < tol:
                if full_pass:
                    converged[li] = 1
                    break
                full_pass = True
            else:
                full_pass = False
        betas[li] = beta
    return betas, converged


def lasso_objective(x, y, lam, beta) -> float:
    n = y.size
    resid = y - x @ beta
    return float(0.5 / n * resid @ resid + lam * np.sum(np.abs(beta)))


def lasso_cd(x, y, lam, beta_start=None, max_sweeps=MAX_SWEEPS, tol=CD_TOL):
    """Lasso solution at a single penalty on an already standardized design."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if lam < 0:
        raise DomainError("lambda must be nonnegative")
    n, p = x.shape
    gram = x.T @ x / n
    xty = x.T @ y / n
    start = np.zeros(p) if beta_start is None else np.asarray(beta_start, dtype=float)
    betas, converged = _cd_gram_path(gram, xty, np.array([float(lam)]), start,
                                     max_sweeps, tol)
    if tol > 0.0 and not converged[0]:
        raise NumericError(f"coordinate descent did not converge in {max_sweeps} sweeps")
    return betas[0]


def _standardize(x, y):
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 0.0, sd, 1.0)
    return (x - mu) / sd, y - y.mean(), sd


def lambda_grid(x_std, y_c, n_lambdas=100, eps=1e-3):
    n = y_c.size
    lam_max = np.max(np.abs(x_std.T @ y_c)) / n
    if lam_max <= 0.0:
        lam_max = 1.0
    return np.geomspace(lam_max, eps * lam_max, n_lambdas)


def cv_lasso(x_aug, y, folds=10, n_lambdas=100, eps=1e-3):
    """Cross-validated Lasso on the augmented design.

    Standardizes columns and centers the response internally, selects the
    penalty minimizing mean out-of-fold squared error over a descending
    log-spaced grid (ties resolve to the larger penalty), refits on all data
    and returns coefficients rescaled back to the original column scales.
    """
    x = np.asarray(x_aug, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = x.shape
    if folds < 2:
        raise DomainError("need at least 2 folds")
    if n < folds:
        raise DataError("fewer observations than folds")
    x_std, y_c, sd = _standardize(x, y)
    lams = lambda_grid(x_std, y_c, n_lambdas, eps)
    fold_ids = np.array_split(np.arange(n), folds)
    sq_err = np.zeros(lams.size)
    for held in fold_ids:
        mask = np.ones(n, dtype=bool)
        mask[held] = False
        xt, yt = x_std[mask], y_c[mask]
        gram = xt.T @ xt / xt.shape[0]
        xty = xt.T @ yt / xt.shape[0]
        betas, converged = _cd_gram_path(gram, xty, lams, np.zeros(p),
                                         MAX_SWEEPS, CD_TOL)
        if not np.all(converged):
            raise NumericError("coordinate descent did not converge in CV fold")
        preds = x_std[held] @ betas.T
        sq_err += np.sum((preds - y_c[held][:, None]) ** 2, axis=0)
    mse = sq_err / n
    best = int(np.argmin(mse))
    lam_star = float(lams[best])
    gram = x_std.T @ x_std / n
    xty = x_std.T @ y_c / n
    betas, converged = _cd_gram_path(gram, xty, lams[:best + 1], np.zeros(p),
                                     MAX_SWEEPS, CD_TOL)
    if not np.all(converged):
        raise NumericError("coordinate descent did not converge on the full data")
    beta_std = betas[-1]
    return lam_star, beta_std / sd


def knockoff_stats(beta) -> np.ndarray:
    """Antisymmetric statistics W_i = |beta_i| - |beta_{d+i}|."""
    beta = np.asarray(beta, dtype=float)
    if beta.size % 2 != 0:
        raise DomainError("beta must stack originals and knockoffs (even length)")
    d = beta.size // 2
    return np.abs(beta[:d]) - np.abs(beta[d:])


def knockoff_threshold(w, q):
    """Smallest feasible threshold and the selected index set.

    tau_q = min{t > 0: (1 + #{W_i <= -t}) / #{W_i >= t} <= q}, searched over
    the positive magnitudes of the statistics; +inf (empty selection) when no
    threshold is feasible.
    """
    w = np.asarray(w, dtype=float)
    if not 0.0 < q < 1.0:
        raise DomainError("q must lie in (0, 1)")
    candidates = np.unique(np.abs(w[w != 0.0]))
    for t in candidates:
        n_neg = np.sum(w <= -t)
        n_pos = np.sum(w >= t)
        if n_pos > 0 and (1.0 + n_neg) / n_pos <= q:
            return float(t), np.flatnonzero(w >= t)
    return np.inf, np.array([], dtype=int)


def score(selected, s_true, d=None):
    """False discovery proportion (0/0 = 0) and power of a selection."""
    sel = set(int(i) for i in np.asarray(selected, dtype=int).ravel())
    true = set(int(i) for i in np.asarray(s_true, dtype=int).ravel())
    if not true:
        raise DomainError("the true support must be nonempty to define power")
    if d is not None and (sel | true) and max(sel | true) >= d:
        raise DomainError("selection indices exceed the number of variables")
    false_pos = len(sel - true)
    fdp = false_pos / max(len(sel), 1)
    power = len(sel & true) / len(true)
    return fdp, power
