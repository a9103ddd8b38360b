"""Bivariate parametric copulas: evaluation, conditioning, inversion and fitting.

Families: Independence, Gaussian, Clayton, Frank, Gumbel.  Clayton and Gumbel
additionally support rotations (90/180/270 degrees) so that negative
dependence is fittable.  All operations are vectorized over observations and
pure; :class:`BivariateCopula` instances are immutable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from numba import njit
from scipy import integrate, optimize
from scipy.special import ndtr, ndtri
from scipy.stats import kendalltau, multivariate_normal

from .exceptions import DataError, DomainError, FitError, NumericError

EPS = 1e-10  # unit-interval clamp; h-functions diverge at the boundary

_SQRT_2PI = np.sqrt(2.0 * np.pi)

FRANK_THETA_MAX = 35.0
CLAYTON_THETA_FIT_MAX = 28.0
GUMBEL_THETA_FIT_MAX = 20.0


class CopulaFamily(Enum):
    INDEPENDENCE = "independence"
    GAUSSIAN = "gaussian"
    CLAYTON = "clayton"
    FRANK = "frank"
    GUMBEL = "gumbel"


ROTATABLE_FAMILIES = (CopulaFamily.CLAYTON, CopulaFamily.GUMBEL)

# MLE search intervals; narrower than the mathematical domains on purpose.
FIT_BOUNDS = {
    CopulaFamily.GAUSSIAN: (-0.9999, 0.9999),
    CopulaFamily.CLAYTON: (1e-4, CLAYTON_THETA_FIT_MAX),
    CopulaFamily.FRANK: (-FRANK_THETA_MAX, FRANK_THETA_MAX),
    CopulaFamily.GUMBEL: (1.0, GUMBEL_THETA_FIT_MAX),
}


def _clip(u):
    return np.clip(np.asarray(u, dtype=float), EPS, 1.0 - EPS)


def _phi(x):
    return np.exp(-0.5 * x * x) / _SQRT_2PI


# ---------------------------------------------------------------------------
# Gaussian family
# ---------------------------------------------------------------------------

def _ga_cdf(th, u, v):
    pts = np.column_stack([ndtri(np.atleast_1d(u)), ndtri(np.atleast_1d(v))])
    mvn = multivariate_normal(mean=[0.0, 0.0], cov=[[1.0, th], [th, 1.0]])
    return np.reshape(mvn.cdf(pts), np.shape(u))


def _ga_logpdf(th, u, v):
    x, y = ndtri(u), ndtri(v)
    s2 = 1.0 - th * th
    return -0.5 * np.log(s2) - (th * th * (x * x + y * y) - 2.0 * th * x * y) / (2.0 * s2)


def _ga_hfunc1(th, u, v):
    x, y = ndtri(u), ndtri(v)
    return ndtr((y - th * x) / np.sqrt(1.0 - th * th))


def _ga_hfunc2(th, u, v):
    return _ga_hfunc1(th, v, u)


def _ga_hinv1(th, u, w):
    x = ndtri(u)
    return ndtr(ndtri(w) * np.sqrt(1.0 - th * th) + th * x)


def _ga_hinv2(th, w, v):
    return _ga_hinv1(th, v, w)


def _ga_d_theta_hfunc1(th, u, v):
    x, y = ndtri(u), ndtri(v)
    s2 = 1.0 - th * th
    q = (y - th * x) / np.sqrt(s2)
    return _phi(q) * (th * y - x) / s2**1.5


def _ga_d_u1_hfunc1(th, u, v):
    x, y = ndtri(u), ndtri(v)
    s2 = 1.0 - th * th
    q = (y - th * x) / np.sqrt(s2)
    return -th * _phi(q) / (np.sqrt(s2) * _phi(x))


def _ga_tau(th):
    return 2.0 / np.pi * np.arcsin(th)


def _ga_tau_inv(tau):
    return np.sin(np.pi * tau / 2.0)


# ---------------------------------------------------------------------------
# Clayton family
# ---------------------------------------------------------------------------

def _cl_gen(th, u, v):
    # M = u^-th + v^-th - 1 and its building blocks, in log space
    lu, lv = np.log(u), np.log(v)
    m = np.exp(-th * lu) + np.exp(-th * lv) - 1.0
    return lu, lv, m


def _cl_cdf(th, u, v):
    _, _, m = _cl_gen(th, u, v)
    return np.maximum(m, EPS) ** (-1.0 / th)


def _cl_logpdf(th, u, v):
    lu, lv, m = _cl_gen(th, u, v)
    return np.log1p(th) - (1.0 + th) * (lu + lv) - (2.0 + 1.0 / th) * np.log(m)


def _cl_hfunc1(th, u, v):
    lu, _, m = _cl_gen(th, u, v)
    return np.exp(-(1.0 + th) * lu - (1.0 + 1.0 / th) * np.log(m))


def _cl_hfunc2(th, u, v):
    return _cl_hfunc1(th, v, u)


def _cl_hinv1(th, u, w):
    lu = np.log(u)
    with np.errstate(over="ignore"):
        t = np.exp(-th * lu) * np.expm1(-th / (1.0 + th) * np.log(w))
        res = np.exp(-np.log1p(t) / th)
    return res


def _cl_hinv2(th, w, v):
    return _cl_hinv1(th, v, w)


def _cl_d_theta_hfunc1(th, u, v):
    lu, lv, m = _cl_gen(th, u, v)
    m_th = -(np.exp(-th * lu) * lu + np.exp(-th * lv) * lv)
    return _cl_hfunc1(th, u, v) * (-lu + np.log(m) / th**2 - (1.0 / th + 1.0) * m_th / m)


def _cl_d_u1_hfunc1(th, u, v):
    lu, lv, m = _cl_gen(th, u, v)
    return np.exp(np.log1p(th) - (th + 2.0) * lu - (1.0 / th + 2.0) * np.log(m)) \
        * -np.expm1(-th * lv)


def _cl_tau(th):
    return th / (th + 2.0)


def _cl_tau_inv(tau):
    return 2.0 * tau / (1.0 - tau)


# ---------------------------------------------------------------------------
# Frank family (|theta| < 1e-8 is treated as the independence limit)
# ---------------------------------------------------------------------------

_FRANK_INDEP_TOL = 1e-8


def _fr_parts(th, u, v):
    gu, gv, g1 = np.expm1(-th * u), np.expm1(-th * v), np.expm1(-th)
    return gu, gv, g1, g1 + gu * gv


def _fr_cdf(th, u, v):
    if abs(th) < _FRANK_INDEP_TOL:
        return u * v
    gu, gv, g1, _ = _fr_parts(th, u, v)
    return -np.log1p(gu * gv / g1) / th


def _fr_logpdf(th, u, v):
    if abs(th) < _FRANK_INDEP_TOL:
        return np.zeros(np.broadcast(u, v).shape)
    gu, gv, g1, d = _fr_parts(th, u, v)
    return np.log(-th * g1) - th * (u + v) - 2.0 * np.log(np.abs(d))


def _fr_hfunc1(th, u, v):
    if abs(th) < _FRANK_INDEP_TOL:
        return v * np.ones_like(u)
    gu, gv, g1, d = _fr_parts(th, u, v)
    return (gu + 1.0) * gv / d


def _fr_hfunc2(th, u, v):
    return _fr_hfunc1(th, v, u)


def _fr_hinv1(th, u, w):
    if abs(th) < _FRANK_INDEP_TOL:
        return w * np.ones_like(u)
    gu = np.expm1(-th * u)
    g1 = np.expm1(-th)
    gv = w * g1 / (1.0 + gu * (1.0 - w))
    return -np.log1p(gv) / th


def _fr_hinv2(th, w, v):
    return _fr_hinv1(th, v, w)


def _fr_d_theta_hfunc1(th, u, v):
    if abs(th) < _FRANK_INDEP_TOL:
        return np.zeros(np.broadcast(u, v).shape)
    gu, gv, g1, d = _fr_parts(th, u, v)
    dgu, dgv, dg1 = -u * (gu + 1.0), -v * (gv + 1.0), -(g1 + 1.0)
    dd = dg1 + dgu * gv + gu * dgv
    return (dgu * gv + (gu + 1.0) * dgv) / d - (gu + 1.0) * gv * dd / d**2


def _fr_d_u1_hfunc1(th, u, v):
    if abs(th) < _FRANK_INDEP_TOL:
        return np.zeros(np.broadcast(u, v).shape)
    gu, gv, g1, d = _fr_parts(th, u, v)
    return -th * (gu + 1.0) * gv * (g1 - gv) / d**2


def _fr_tau(th):
    if abs(th) < _FRANK_INDEP_TOL:
        return 0.0
    sign = np.sign(th)
    th = abs(th)
    debye = integrate.quad(lambda x: x / np.expm1(x), 0.0, th)[0]
    return sign * (1.0 - 4.0 / th * (1.0 - debye / th))


def _fr_tau_inv(tau, xtol=1e-10):
    # bisection on the monotone tau(theta) relation over [1e-6, FRANK_THETA_MAX]
    sign = 1.0 if tau > 0 else -1.0
    target = abs(tau)
    lo, hi = 1e-6, FRANK_THETA_MAX
    if target >= _fr_tau(hi):
        raise DomainError(f"Kendall tau {tau} not attainable for Frank with |theta|<={hi}")
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if _fr_tau(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < xtol:
            break
    return sign * 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Gumbel family
# ---------------------------------------------------------------------------

def _gu_parts(th, u, v):
    xt, yt = -np.log(u), -np.log(v)
    t = (xt**th + yt**th) ** (1.0 / th)
    return xt, yt, t


def _gu_cdf(th, u, v):
    _, _, t = _gu_parts(th, u, v)
    return np.exp(-t)


def _gu_logpdf(th, u, v):
    xt, yt, t = _gu_parts(th, u, v)
    return (-t + (th - 1.0) * (np.log(xt) + np.log(yt)) + (2.0 - 2.0 * th) * np.log(t)
            + np.log1p((th - 1.0) / t) - np.log(u) - np.log(v))


def _gu_hfunc1(th, u, v):
    xt, _, t = _gu_parts(th, u, v)
    return np.exp(-t + (1.0 - th) * np.log(t) + (th - 1.0) * np.log(xt) - np.log(u))


def _gu_hfunc2(th, u, v):
    return _gu_hfunc1(th, v, u)


def _gu_tau(th):
    return 1.0 - 1.0 / th


def _gu_tau_inv(tau):
    return 1.0 / (1.0 - tau)


# ---------------------------------------------------------------------------
# Independence
# ---------------------------------------------------------------------------

def _ind_zeros(u, v):
    return np.zeros(np.broadcast(u, v).shape)


_FAMILY_FUNS = {
    CopulaFamily.GAUSSIAN: {
        "cdf": _ga_cdf, "logpdf": _ga_logpdf,
        "hfunc1": _ga_hfunc1, "hfunc2": _ga_hfunc2,
        "hinv1": _ga_hinv1, "hinv2": _ga_hinv2,
        "d_theta_hfunc1": _ga_d_theta_hfunc1, "d_u1_hfunc1": _ga_d_u1_hfunc1,
        "tau": _ga_tau, "tau_inv": _ga_tau_inv,
    },
    CopulaFamily.CLAYTON: {
        "cdf": _cl_cdf, "logpdf": _cl_logpdf,
        "hfunc1": _cl_hfunc1, "hfunc2": _cl_hfunc2,
        "hinv1": _cl_hinv1, "hinv2": _cl_hinv2,
        "d_theta_hfunc1": _cl_d_theta_hfunc1, "d_u1_hfunc1": _cl_d_u1_hfunc1,
        "tau": _cl_tau, "tau_inv": _cl_tau_inv,
    },
    CopulaFamily.FRANK: {
        "cdf": _fr_cdf, "logpdf": _fr_logpdf,
        "hfunc1": _fr_hfunc1, "hfunc2": _fr_hfunc2,
        "hinv1": _fr_hinv1, "hinv2": _fr_hinv2,
        "d_theta_hfunc1": _fr_d_theta_hfunc1, "d_u1_hfunc1": _fr_d_u1_hfunc1,
        "tau": _fr_tau, "tau_inv": _fr_tau_inv,
    },
    CopulaFamily.GUMBEL: {
        "cdf": _gu_cdf, "logpdf": _gu_logpdf,
        "hfunc1": _gu_hfunc1, "hfunc2": _gu_hfunc2,
        "hinv1": None, "hinv2": None,  # numeric inversion
        "d_theta_hfunc1": None, "d_u1_hfunc1": None,  # finite differences
        "tau": _gu_tau, "tau_inv": _gu_tau_inv,
    },
}


def _validate_theta(family: CopulaFamily, theta: float) -> None:
    if family is CopulaFamily.INDEPENDENCE:
        if theta is not None and not np.isnan(theta):
            raise DomainError("independence copula has no parameter")
        return
    if theta is None or not np.isfinite(theta):
        raise DomainError(f"{family.value} copula needs a finite parameter")
    if family is CopulaFamily.GAUSSIAN and not -1.0 < theta < 1.0:
        raise DomainError(f"gaussian rho must be in (-1, 1), got {theta}")
    if family is CopulaFamily.CLAYTON and theta <= 0.0:
        raise DomainError(f"clayton theta must be positive, got {theta}")
    if family is CopulaFamily.GUMBEL and theta < 1.0:
        raise DomainError(f"gumbel theta must be >= 1, got {theta}")
    if family is CopulaFamily.FRANK and theta == 0.0:
        raise DomainError("frank theta must be nonzero")


# rotation tables: (u, v) |-> base arguments (a, b), see the h-function algebra
def _rot_args(rotation: int, u, v):
    if rotation == 0:
        return u, v
    if rotation == 90:
        return v, 1.0 - u
    if rotation == 180:
        return 1.0 - u, 1.0 - v
    return 1.0 - v, u  # 270


@dataclass(frozen=True)
class PairDerivatives:
    """All copula partials needed by the derivative recursions.

    ``d_u2_hfunc1`` is the mixed partial of the cdf and therefore equals the
    density exactly; it is carried explicitly because both recursion loops
    address it by name.
    """

    pdf: np.ndarray
    hfunc1: np.ndarray
    hfunc2: np.ndarray
    d_theta_hfunc1: np.ndarray
    d_u1_hfunc1: np.ndarray
    d_u2_hfunc1: np.ndarray
    d_theta_hfunc2: np.ndarray
    d_u2_hfunc2: np.ndarray


@dataclass(frozen=True)
class BivariateCopula:
    """A parametric pair copula with family, rotation and parameter.

    Parameters
    ----------
    family : CopulaFamily
    rotation : int
        One of 0, 90, 180, 270; rotations other than 0 are only supported
        for Clayton and Gumbel.
    theta : float or None
        Dependence parameter; ``None`` for the independence copula.
    """

    family: CopulaFamily
    rotation: int = 0
    theta: float | None = None

    def __post_init__(self):
        if self.rotation not in (0, 90, 180, 270):
            raise DomainError(f"rotation must be one of 0/90/180/270, got {self.rotation}")
        if self.rotation != 0 and self.family not in ROTATABLE_FAMILIES:
            raise DomainError(f"rotation {self.rotation} not supported for {self.family.value}")
        _validate_theta(self.family, self.theta)

    # -- basic properties ---------------------------------------------------

    @property
    def n_params(self) -> int:
        return 0 if self.family is CopulaFamily.INDEPENDENCE else 1

    def __repr__(self):
        if self.family is CopulaFamily.INDEPENDENCE:
            return "BivariateCopula(independence)"
        rot = f", rot={self.rotation}" if self.rotation else ""
        return f"BivariateCopula({self.family.value}, theta={self.theta:.6g}{rot})"

    def with_theta(self, theta: float) -> "BivariateCopula":
        return BivariateCopula(self.family, self.rotation, theta)

    def tau(self) -> float:
        """Population Kendall's tau implied by the parameter."""
        if self.family is CopulaFamily.INDEPENDENCE:
            return 0.0
        tau = float(_FAMILY_FUNS[self.family]["tau"](self.theta))
        return -tau if self.rotation in (90, 270) else tau

    # -- evaluation ---------------------------------------------------------

    def cdf(self, u1, u2):
        """Copula cdf C(u1, u2); boundary identities hold exactly."""
        scalar = np.isscalar(u1) and np.isscalar(u2)
        u1, u2 = np.broadcast_arrays(np.asarray(u1, float), np.asarray(u2, float))
        if np.any((u1 < 0) | (u1 > 1) | (u2 < 0) | (u2 > 1)):
            raise DomainError("cdf arguments must lie in [0, 1]")
        if self.family is CopulaFamily.INDEPENDENCE:
            res = u1 * u2
        else:
            a, b = _rot_args(self.rotation, _clip(u1), _clip(u2))
            base = _FAMILY_FUNS[self.family]["cdf"](self.theta, a, b)
            if self.rotation == 0:
                res = base
            elif self.rotation == 90:
                res = u2 - base
            elif self.rotation == 180:
                res = u1 + u2 - 1.0 + base
            else:
                res = u1 - base
            res = np.where(u2 >= 1.0, u1, np.where(u1 >= 1.0, u2, res))
            res = np.where((u1 <= 0.0) | (u2 <= 0.0), 0.0, res)
            res = np.clip(res, 0.0, 1.0)
        return float(res) if scalar else res

    def pdf(self, u1, u2):
        return np.exp(self.logpdf(u1, u2))

    def logpdf(self, u1, u2):
        scalar = np.isscalar(u1) and np.isscalar(u2)
        u1, u2 = _clip(u1), _clip(u2)
        if self.family is CopulaFamily.INDEPENDENCE:
            res = np.zeros(np.broadcast(u1, u2).shape)
        else:
            a, b = _rot_args(self.rotation, u1, u2)
            res = _FAMILY_FUNS[self.family]["logpdf"](self.theta, a, b)
        return float(res) if scalar else res

    def hfunc1(self, u1, u2):
        """Conditional cdf of the second argument given the first, d1 C."""
        scalar = np.isscalar(u1) and np.isscalar(u2)
        res = self._hfunc1_raw(_clip(u1), _clip(u2))
        res = _clip(res)
        return float(res) if scalar else res

    def hfunc2(self, u1, u2):
        """Conditional cdf of the first argument given the second, d2 C."""
        scalar = np.isscalar(u1) and np.isscalar(u2)
        res = self._hfunc2_raw(_clip(u1), _clip(u2))
        res = _clip(res)
        return float(res) if scalar else res

    def _hfunc1_raw(self, u1, u2):
        if self.family is CopulaFamily.INDEPENDENCE:
            return u2 * np.ones_like(u1)
        funs = _FAMILY_FUNS[self.family]
        a, b = _rot_args(self.rotation, u1, u2)
        if self.rotation == 0:
            return funs["hfunc1"](self.theta, a, b)
        if self.rotation == 90:
            return funs["hfunc2"](self.theta, a, b)
        if self.rotation == 180:
            return 1.0 - funs["hfunc1"](self.theta, a, b)
        return 1.0 - funs["hfunc2"](self.theta, a, b)  # 270

    def _hfunc2_raw(self, u1, u2):
        if self.family is CopulaFamily.INDEPENDENCE:
            return u1 * np.ones_like(u2)
        funs = _FAMILY_FUNS[self.family]
        a, b = _rot_args(self.rotation, u1, u2)
        if self.rotation == 0:
            return funs["hfunc2"](self.theta, a, b)
        if self.rotation == 90:
            return 1.0 - funs["hfunc1"](self.theta, a, b)
        if self.rotation == 180:
            return 1.0 - funs["hfunc2"](self.theta, a, b)
        return funs["hfunc1"](self.theta, a, b)  # 270

    # -- inverse conditioning -----------------------------------------------

    def hinv1(self, u1, w):
        """Solve hfunc1(u1, v) = w for v."""
        scalar = np.isscalar(u1) and np.isscalar(w)
        u1, w = np.broadcast_arrays(_clip(u1), _clip(w))
        if self.family is CopulaFamily.INDEPENDENCE:
            res = w.copy()
        else:
            funs = _FAMILY_FUNS[self.family]
            if self.rotation == 0:
                res = self._hinv_base(funs, 1, u1, w)
            elif self.rotation == 90:
                res = self._hinv_base(funs, 2, 1.0 - u1, w)
            elif self.rotation == 180:
                res = 1.0 - self._hinv_base(funs, 1, 1.0 - u1, 1.0 - w)
            else:  # 270
                res = 1.0 - self._hinv_base(funs, 2, u1, 1.0 - w)
        res = _clip(res)
        return float(res) if scalar else res

    def hinv2(self, w, u2):
        """Solve hfunc2(v, u2) = w for v."""
        scalar = np.isscalar(w) and np.isscalar(u2)
        w, u2 = np.broadcast_arrays(_clip(w), _clip(u2))
        if self.family is CopulaFamily.INDEPENDENCE:
            res = w.copy()
        else:
            funs = _FAMILY_FUNS[self.family]
            if self.rotation == 0:
                res = self._hinv_base(funs, 2, u2, w)
            elif self.rotation == 90:
                res = 1.0 - self._hinv_base(funs, 1, u2, 1.0 - w)
            elif self.rotation == 180:
                res = 1.0 - self._hinv_base(funs, 2, 1.0 - u2, 1.0 - w)
            else:  # 270
                res = self._hinv_base(funs, 1, 1.0 - u2, w)
        res = _clip(res)
        return float(res) if scalar else res

    def _hinv_base(self, funs, which: int, cond, w):
        """Invert the unrotated h-function number `which` given the conditioning arg."""
        key = "hinv1" if which == 1 else "hinv2"
        if funs[key] is not None:
            if which == 1:
                return funs[key](self.theta, cond, w)
            return funs[key](self.theta, w, cond)
        if which == 1:
            def h(x):
                return funs["hfunc1"](self.theta, cond, x)
        else:
            def h(x):
                return funs["hfunc2"](self.theta, x, cond)
        return _bisect_monotone(h, w, logpdf=lambda x: (
            funs["logpdf"](self.theta, cond, x) if which == 1
            else funs["logpdf"](self.theta, x, cond)))

    # -- derivative bundle ---------------------------------------------------

    def derivatives(self, u1, u2) -> PairDerivatives:
        """Density, both h-functions and their theta/argument partials.

        Gaussian, Clayton and Frank partials are analytic; Gumbel falls back
        to central finite differences (step 1e-6), which is accurate to
        ~1e-4 relative and sufficient for gradient-based tuning.
        """
        u1, u2 = np.broadcast_arrays(_clip(u1), _clip(u2))
        pdf = self.pdf(u1, u2)
        h1 = _clip(self._hfunc1_raw(u1, u2))
        h2 = _clip(self._hfunc2_raw(u1, u2))
        if self.family is CopulaFamily.INDEPENDENCE:
            z = np.zeros_like(pdf)
            return PairDerivatives(pdf, h1, h2, z, z.copy(), pdf, z.copy(), z.copy())
        funs = _FAMILY_FUNS[self.family]
        if funs["d_theta_hfunc1"] is not None:
            a, b = _rot_args(self.rotation, u1, u2)
            dth1 = funs["d_theta_hfunc1"](self.theta, a, b)
            dth2 = funs["d_theta_hfunc1"](self.theta, b, a)
            d11 = funs["d_u1_hfunc1"](self.theta, a, b)
            d22 = funs["d_u1_hfunc1"](self.theta, b, a)
            if self.rotation == 90:
                dth1, dth2 = dth2, -dth1
                d11, d22 = -d22, -d11
            elif self.rotation == 180:
                dth1, dth2 = -dth1, -dth2
            elif self.rotation == 270:
                dth1, dth2 = -dth2, dth1
                d11, d22 = -d22, -d11
        else:
            dth1, d11, dth2, d22 = self._fd_partials(u1, u2)
        return PairDerivatives(pdf, h1, h2, dth1, d11, pdf, dth2, d22)

    def _fd_partials(self, u1, u2):
        s_th = 1e-6 * max(1.0, abs(self.theta))
        lo_ok = self.theta - s_th
        if self.family is CopulaFamily.GUMBEL and lo_ok < 1.0:
            up = self.with_theta(self.theta + s_th)
            dth1 = (up._hfunc1_raw(u1, u2) - self._hfunc1_raw(u1, u2)) / s_th
            dth2 = (up._hfunc2_raw(u1, u2) - self._hfunc2_raw(u1, u2)) / s_th
        else:
            up, dn = self.with_theta(self.theta + s_th), self.with_theta(lo_ok)
            dth1 = (up._hfunc1_raw(u1, u2) - dn._hfunc1_raw(u1, u2)) / (2.0 * s_th)
            dth2 = (up._hfunc2_raw(u1, u2) - dn._hfunc2_raw(u1, u2)) / (2.0 * s_th)
        s1 = np.minimum(1e-6, np.minimum(u1, 1.0 - u1) / 2.0)
        s2 = np.minimum(1e-6, np.minimum(u2, 1.0 - u2) / 2.0)
        d11 = (self._hfunc1_raw(u1 + s1, u2) - self._hfunc1_raw(u1 - s1, u2)) / (2.0 * s1)
        d22 = (self._hfunc2_raw(u1, u2 + s2) - self._hfunc2_raw(u1, u2 - s2)) / (2.0 * s2)
        return dth1, d11, dth2, d22

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {"family": self.family.value, "rotation": self.rotation,
                "theta": None if self.theta is None else float(self.theta)}

    @staticmethod
    def from_dict(rec: dict) -> "BivariateCopula":
        return BivariateCopula(CopulaFamily(rec["family"]), int(rec["rotation"]),
                               rec["theta"])


INDEPENDENCE = BivariateCopula(CopulaFamily.INDEPENDENCE)


def _bisect_monotone(h, w, logpdf=None, max_iter=100, width=1e-10):
    """Invert a monotone h in its free argument by bracketed bisection.

    Bisects until the bracket is below `width` (100-iteration cap), then
    applies safeguarded Newton polish steps when a density is available.
    """
    lo = np.full_like(w, EPS)
    hi = np.full_like(w, 1.0 - EPS)
    it = 0
    while it < max_iter and np.max(hi - lo) > width:
        mid = 0.5 * (lo + hi)
        too_low = h(mid) < w
        lo = np.where(too_low, mid, lo)
        hi = np.where(too_low, hi, mid)
        it += 1
        if it >= 30 and logpdf is not None and np.max(hi - lo) < 1e-8:
            break
    x = 0.5 * (lo + hi)
    if logpdf is not None:
        for _ in range(3):
            with np.errstate(over="ignore", invalid="ignore"):
                step = (h(x) - w) * np.exp(-logpdf(x))
            x_new = x - step
            bad = ~np.isfinite(x_new) | (x_new <= lo) | (x_new >= hi)
            x = np.where(bad, 0.5 * (lo + hi), x_new)
    resid = np.abs(h(x) - w)
    interior = (x > 2.0 * EPS) & (x < 1.0 - 2.0 * EPS)  # boundary-pinned roots are fine
    if np.any(interior) and np.max(resid[interior], initial=0.0) > 1e-6:
        raise NumericError(
            f"h-inverse did not converge (max residual {np.max(resid[interior]):.2e})")
    return x


# ---------------------------------------------------------------------------
# fused negative log-likelihood kernels (fitting fast path)
# ---------------------------------------------------------------------------

@njit(cache=True, fastmath=True)
def _nll_clayton_kernel(lu, lv, th):
    acc = 0.0
    c0 = math.log1p(th)
    e1 = 2.0 + 1.0 / th
    for k in range(lu.size):
        m = math.exp(-th * lu[k]) + math.exp(-th * lv[k]) - 1.0
        acc += c0 - (1.0 + th) * (lu[k] + lv[k]) - e1 * math.log(m)
    return -acc


@njit(cache=True, fastmath=True)
def _nll_gumbel_kernel(xt, yt, lxt, lyt, th):
    acc = 0.0
    for k in range(xt.size):
        ls = th * lxt[k] + math.log1p(math.exp(th * (lyt[k] - lxt[k]))) \
            if lxt[k] >= lyt[k] else \
            th * lyt[k] + math.log1p(math.exp(th * (lxt[k] - lyt[k])))
        t = math.exp(ls / th)
        acc += (-t + (th - 1.0) * (lxt[k] + lyt[k]) + (2.0 - 2.0 * th) * ls / th
                + math.log1p((th - 1.0) / t) + xt[k] + yt[k])
    return -acc


@njit(cache=True, fastmath=True)
def _nll_frank_kernel(u, v, th):
    g1 = math.expm1(-th)
    c0 = math.log(abs(th * g1))
    acc = 0.0
    for k in range(u.size):
        d = g1 + math.expm1(-th * u[k]) * math.expm1(-th * v[k])
        acc += c0 - th * (u[k] + v[k]) - 2.0 * math.log(abs(d))
    return -acc


class _EdgeFitter:
    """Caches per-edge data transforms so family NLLs are cheap to evaluate.

    The Gaussian NLL reduces to the sufficient statistics (Sxx, Syy, Sxy);
    the Archimedean families use fused kernels on pre-logged arguments.
    """

    def __init__(self, u1, u2):
        self.u1 = _clip(u1)
        self.u2 = _clip(u2)
        self.n = self.u1.size
        self._cache = {}

    def _rotated(self, rotation):
        key = ("rot", rotation)
        if key not in self._cache:
            self._cache[key] = _rot_args(rotation, self.u1, self.u2)
        return self._cache[key]

    def nll_fun(self, family, rotation):
        a, b = self._rotated(rotation)
        if family is CopulaFamily.GAUSSIAN:
            key = ("gauss", rotation)
            if key not in self._cache:
                x, y = ndtri(a), ndtri(b)
                self._cache[key] = (float(x @ x), float(y @ y), float(x @ y))
            sxx, syy, sxy = self._cache[key]
            n = self.n

            def nll(th):
                s2 = 1.0 - th * th
                return 0.5 * n * np.log(s2) + \
                    (th * th * (sxx + syy) - 2.0 * th * sxy) / (2.0 * s2)
            return nll
        if family is CopulaFamily.CLAYTON:
            key = ("logs", rotation)
            if key not in self._cache:
                self._cache[key] = (np.log(a), np.log(b))
            lu, lv = self._cache[key]
            return lambda th: _nll_clayton_kernel(lu, lv, th)
        if family is CopulaFamily.GUMBEL:
            key = ("gumbel", rotation)
            if key not in self._cache:
                xt, yt = -np.log(a), -np.log(b)
                self._cache[key] = (xt, yt, np.log(xt), np.log(yt))
            xt, yt, lxt, lyt = self._cache[key]
            return lambda th: _nll_gumbel_kernel(xt, yt, lxt, lyt, th)
        if family is CopulaFamily.FRANK:
            return lambda th: _nll_frank_kernel(a, b, th)
        raise DomainError(f"no likelihood for family {family}")


# ---------------------------------------------------------------------------
# Kendall's tau maps and fitting
# ---------------------------------------------------------------------------

def tau_to_par(family: CopulaFamily, tau: float, rotation: int = 0) -> float:
    """Map Kendall's tau to the family parameter; inverse of BivariateCopula.tau."""
    if family is CopulaFamily.INDEPENDENCE:
        raise DomainError("independence copula has no parameter")
    if rotation != 0 and family not in ROTATABLE_FAMILIES:
        raise DomainError(f"rotation {rotation} not supported for {family.value}")
    if not -1.0 < tau < 1.0:
        raise DomainError(f"tau must be in (-1, 1), got {tau}")
    if rotation in (90, 270):
        tau = -tau
    if family is CopulaFamily.CLAYTON:
        if tau <= 0.0:
            raise DomainError(f"tau={tau} not attainable for clayton with rotation {rotation}")
        return float(_cl_tau_inv(tau))
    if family is CopulaFamily.GUMBEL:
        if tau < 0.0:
            raise DomainError(f"tau={tau} not attainable for gumbel with rotation {rotation}")
        return float(_gu_tau_inv(tau))
    if family is CopulaFamily.FRANK:
        if tau == 0.0:
            raise DomainError("tau=0 not attainable for frank (theta must be nonzero)")
        return float(_fr_tau_inv(tau))
    return float(_ga_tau_inv(tau))


def _check_pair_data(u_data) -> np.ndarray:
    u = np.asarray(u_data, dtype=float)
    if u.ndim != 2 or u.shape[1] != 2:
        raise DataError("pair data must have shape (n, 2)")
    if u.shape[0] < 10:
        raise DataError(f"need at least 10 observations, got {u.shape[0]}")
    if np.any(~np.isfinite(u)) or np.any((u <= 0.0) | (u >= 1.0)):
        raise DataError("pair data must lie strictly inside (0, 1)^2")
    return u


def _tau_start(family, rotation, empirical_tau):
    lo, hi = FIT_BOUNDS[family]
    fallback = {CopulaFamily.GAUSSIAN: 0.0, CopulaFamily.CLAYTON: 1.0,
                CopulaFamily.FRANK: 1.0, CopulaFamily.GUMBEL: 1.5}[family]
    tau = float(np.clip(empirical_tau, -0.95, 0.95))
    if rotation in (90, 270):
        tau = -tau
    try:
        if family is CopulaFamily.CLAYTON:
            if tau <= 0.0:
                raise DomainError("negative tau")
            th = _cl_tau_inv(tau)
        elif family is CopulaFamily.GUMBEL:
            if tau < 0.0:
                raise DomainError("negative tau")
            th = _gu_tau_inv(tau)
        elif family is CopulaFamily.FRANK:
            if tau == 0.0:
                raise DomainError("zero tau")
            th = _fr_tau_inv(tau, xtol=1e-3)
        else:
            th = _ga_tau_inv(tau)
    except DomainError:
        return fallback
    return float(np.clip(th, lo, hi))


def _fit_theta(fitter: _EdgeFitter, family, rotation, empirical_tau):
    """Bounded 1-D MLE; the Kendall-tau start value competes with the
    optimizer result and the better log-likelihood wins."""
    lo, hi = FIT_BOUNDS[family]
    th_tau = _tau_start(family, rotation, empirical_tau)
    raw_nll = fitter.nll_fun(family, rotation)

    def nll(th):
        if not lo <= th <= hi:
            return 1e300
        with np.errstate(all="ignore"):
            val = raw_nll(float(th))
        return val if np.isfinite(val) else 1e300

    res = optimize.minimize_scalar(nll, bounds=(lo, hi), method="bounded",
                                   options={"xatol": 2e-4})
    th_hat, f_hat = float(res.x), float(res.fun)
    f_tau = nll(th_tau)
    if f_tau < f_hat:
        th_hat, f_hat = th_tau, f_tau
    if not np.isfinite(f_hat) or f_hat >= 1e300:
        raise FitError(f"MLE failed for {family.value} (rotation {rotation})")
    if family is CopulaFamily.FRANK and th_hat == 0.0:
        th_hat = 1e-6
    return th_hat, f_hat


def fit_mle(family: CopulaFamily, rotation: int, u_data,
            empirical_tau: float | None = None) -> BivariateCopula:
    """Fit the copula parameter by maximum likelihood.

    1-D bounded optimization over the family's fit interval; the Kendall-tau
    moment estimate serves as a competing start value, and the better of the
    two log-likelihoods is returned.
    """
    if family is CopulaFamily.INDEPENDENCE:
        return INDEPENDENCE
    u = _check_pair_data(u_data)
    if empirical_tau is None:
        empirical_tau, _ = kendalltau(u[:, 0], u[:, 1])
    if not np.isfinite(empirical_tau):
        raise FitError("Kendall's tau undefined (degenerate pair data)")
    fitter = _EdgeFitter(u[:, 0], u[:, 1])
    th_hat, _ = _fit_theta(fitter, family, rotation, empirical_tau)
    return BivariateCopula(family, rotation, th_hat)


def loglik(cop: BivariateCopula, u_data) -> float:
    u = np.asarray(u_data, dtype=float)
    return float(np.sum(cop.logpdf(u[:, 0], u[:, 1])))


def aic(cop: BivariateCopula, u_data) -> float:
    """Akaike information criterion; exactly 0 for the independence copula."""
    if cop.family is CopulaFamily.INDEPENDENCE:
        return 0.0
    return -2.0 * loglik(cop, u_data) + 2.0 * cop.n_params


def select_family(u_data, candidates: Sequence[tuple[CopulaFamily, int]],
                  empirical_tau: float | None = None) -> BivariateCopula:
    """Fit every candidate (family, rotation) by MLE and return the AIC minimizer."""
    u = _check_pair_data(u_data)
    if not candidates:
        raise FitError("empty candidate set")
    if empirical_tau is None:
        empirical_tau, _ = kendalltau(u[:, 0], u[:, 1])
    if not np.isfinite(empirical_tau):
        raise FitError("Kendall's tau undefined (degenerate pair data)")
    fitter = _EdgeFitter(u[:, 0], u[:, 1])
    best, best_aic = None, np.inf
    errors = []
    for family, rotation in candidates:
        if family is CopulaFamily.INDEPENDENCE:
            cop, cand_aic = INDEPENDENCE, 0.0
        else:
            try:
                th_hat, f_hat = _fit_theta(fitter, family, rotation, empirical_tau)
                cop = BivariateCopula(family, rotation, th_hat)
                cand_aic = 2.0 * f_hat + 2.0
            except (FitError, DomainError, DataError) as exc:
                errors.append(f"{family.value}/{rotation}: {exc}")
                continue
        if cand_aic < best_aic:
            best, best_aic = cop, cand_aic
    if best is None:
        raise FitError("all candidate fits failed: " + "; ".join(errors))
    return best


def default_candidates(neg_tau: bool = False) -> list[tuple[CopulaFamily, int]]:
    """Candidate set used by the vine fitter; rotations chosen by the tau sign."""
    rots = (90, 270) if neg_tau else (0, 180)
    cands = [(CopulaFamily.INDEPENDENCE, 0), (CopulaFamily.GAUSSIAN, 0),
             (CopulaFamily.FRANK, 0)]
    cands += [(CopulaFamily.CLAYTON, r) for r in rots]
    cands += [(CopulaFamily.GUMBEL, r) for r in rots]
    return cands
