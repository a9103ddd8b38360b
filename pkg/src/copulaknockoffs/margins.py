"""Univariate marginal models mapping observations to and from the unit interval.

Three kinds: a Gaussian-kernel KDE with Silverman bandwidth (the default for
copula-based knockoffs), a parametric normal fit, and rescaled empirical
ranks.  All models are immutable after fitting; cdf/quantile/pdf are pure and
vectorized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np
from numba import njit
from scipy.special import ndtr, ndtri

from .exceptions import DomainError, FitError

_SQRT_2PI = np.sqrt(2.0 * np.pi)


@njit(cache=True)
def _kde_cdf_kernel(x, sample, h):
    inv = 1.0 / (h * math.sqrt(2.0))
    out = np.empty(x.size)
    for i in range(x.size):
        acc = 0.0
        for k in range(sample.size):
            acc += math.erf((x[i] - sample[k]) * inv)
        out[i] = 0.5 + 0.5 * acc / sample.size
    return out


@njit(cache=True)
def _kde_cdf_pdf_kernel(x, sample, h):
    inv = 1.0 / (h * math.sqrt(2.0))
    cdf = np.empty(x.size)
    pdf = np.empty(x.size)
    norm = 1.0 / (sample.size * h * math.sqrt(2.0 * math.pi))
    for i in range(x.size):
        acc_c = 0.0
        acc_p = 0.0
        for k in range(sample.size):
            z = (x[i] - sample[k]) / h
            acc_c += math.erf(z * h * inv)
            acc_p += math.exp(-0.5 * z * z)
        cdf[i] = 0.5 + 0.5 * acc_c / sample.size
        pdf[i] = acc_p * norm
    return cdf, pdf


class MarginKind(Enum):
    KDE = "kde"
    NORMAL = "normal"
    EMPIRICAL = "empirical"


@dataclass(frozen=True)
class MarginalModel:
    """A fitted univariate distribution with cdf, quantile and pdf."""

    kind: MarginKind
    sample: np.ndarray | None = None  # sorted; KDE and empirical kinds
    bandwidth: float | None = None
    mean: float | None = None
    sd: float | None = None

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind is MarginKind.NORMAL:
            return ndtr((x - self.mean) / self.sd)
        if self.kind is MarginKind.EMPIRICAL:
            n = self.sample.size
            return np.searchsorted(self.sample, x, side="right") / (n + 1.0)
        return self._kde_cdf(x)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind is MarginKind.NORMAL:
            z = (x - self.mean) / self.sd
            return np.exp(-0.5 * z * z) / (_SQRT_2PI * self.sd)
        if self.kind is MarginKind.EMPIRICAL:
            raise DomainError("empirical margin has no density")
        return self._kde_pdf(x)

    def quantile(self, u):
        u = np.asarray(u, dtype=float)
        if np.any((u <= 0.0) | (u >= 1.0)):
            raise DomainError("quantile argument must lie strictly inside (0, 1)")
        if self.kind is MarginKind.NORMAL:
            return self.mean + self.sd * ndtri(u)
        if self.kind is MarginKind.EMPIRICAL:
            n = self.sample.size
            idx = np.ceil(u * (n + 1.0)).astype(int)
            return self.sample[np.clip(idx, 1, n) - 1]
        return self._kde_quantile(u)

    # -- KDE internals --------------------------------------------------------

    def _kde_cdf(self, x):
        flat = np.ascontiguousarray(np.atleast_1d(x).ravel(), dtype=float)
        return _kde_cdf_kernel(flat, self.sample, self.bandwidth).reshape(np.shape(x))

    def _kde_pdf(self, x):
        flat = np.ascontiguousarray(np.atleast_1d(x).ravel(), dtype=float)
        _, pdf = _kde_cdf_pdf_kernel(flat, self.sample, self.bandwidth)
        return pdf.reshape(np.shape(x))

    @cached_property
    def _quantile_grid(self):
        # monotone cdf grid over [min - 5h, max + 5h] for initial brackets
        grid_x = np.linspace(self.sample[0] - 5.0 * self.bandwidth,
                             self.sample[-1] + 5.0 * self.bandwidth, 1024)
        return grid_x, self._kde_cdf(grid_x)

    def _kde_cdf_pdf(self, x):
        flat = np.ascontiguousarray(np.atleast_1d(x).ravel(), dtype=float)
        return _kde_cdf_pdf_kernel(flat, self.sample, self.bandwidth)

    def _kde_quantile(self, u):
        # monotone bracketing off the cached cdf grid, then bisection with
        # safeguarded Newton acceleration; an element is done once its bracket
        # is below 1e-9 or its Newton step goes below 1e-12
        flat = np.atleast_1d(u).ravel()
        grid_x, grid_cdf = self._quantile_grid
        idx = np.clip(np.searchsorted(grid_cdf, flat), 1, grid_x.size - 1)
        lo, hi = grid_x[idx - 1].copy(), grid_x[idx].copy()
        x = np.empty_like(flat)
        active = np.arange(flat.size)
        xs = 0.5 * (lo + hi)
        for it in range(200):
            f, dens = self._kde_cdf_pdf(xs)
            f -= flat[active]
            below = f < 0.0
            lo[active] = np.where(below, xs, lo[active])
            hi[active] = np.where(below, hi[active], xs)
            width = hi[active] - lo[active]
            with np.errstate(divide="ignore", invalid="ignore"):
                step = f / dens
            x_new = xs - step
            ok = np.isfinite(x_new) & (x_new > lo[active]) & (x_new < hi[active])
            tiny = ok & (np.abs(step) < 1e-12)
            # keep every 4th step a pure bisection so the bracket always shrinks
            use_newton = ok & ((it % 4 != 3) | tiny)
            xs = np.where(use_newton, x_new, 0.5 * (lo[active] + hi[active]))
            x[active] = xs
            converged = tiny | (width < 1e-9)
            if converged.all():
                break
            keep = ~converged
            active = active[keep]
            xs = xs[keep]
        return x.reshape(np.shape(u))

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        rec = {"kind": self.kind.value}
        if self.kind is MarginKind.NORMAL:
            rec.update(mean=float(self.mean), sd=float(self.sd))
        else:
            rec["sample"] = [float(v) for v in self.sample]
            if self.kind is MarginKind.KDE:
                rec["bandwidth"] = float(self.bandwidth)
        return rec

    @staticmethod
    def from_dict(rec: dict) -> "MarginalModel":
        kind = MarginKind(rec["kind"])
        if kind is MarginKind.NORMAL:
            return MarginalModel(kind, mean=rec["mean"], sd=rec["sd"])
        sample = np.asarray(rec["sample"], dtype=float)
        return MarginalModel(kind, sample=sample, bandwidth=rec.get("bandwidth"))


def fit_margin(sample, kind: MarginKind = MarginKind.KDE) -> MarginalModel:
    """Fit a marginal model to a univariate sample.

    KDE uses a Gaussian kernel with Silverman bandwidth
    ``1.06 * sigma * n**(-1/5)`` where sigma = min(sd, IQR/1.349) for
    robustness to heavy tails.
    """
    x = np.asarray(sample, dtype=float).ravel()
    if x.size < 10:
        raise FitError(f"need at least 10 observations, got {x.size}")
    if np.any(~np.isfinite(x)):
        raise FitError("sample contains non-finite values")
    sd = float(np.std(x, ddof=1))
    if kind is MarginKind.NORMAL:
        if sd <= 0.0:
            raise FitError("zero-variance sample")
        return MarginalModel(MarginKind.NORMAL, mean=float(np.mean(x)), sd=sd)
    x_sorted = np.sort(x)
    if kind is MarginKind.EMPIRICAL:
        return MarginalModel(MarginKind.EMPIRICAL, sample=x_sorted)
    iqr = float(np.subtract(*np.percentile(x, [75, 25])))
    sigma = min(sd, iqr / 1.349) if iqr > 0.0 else sd
    if sigma <= 0.0:
        raise FitError("zero-variance sample")
    h = 1.06 * sigma * x.size ** (-0.2)
    return MarginalModel(MarginKind.KDE, sample=x_sorted, bandwidth=h)
