"""The three knockoff generators behind one fit/generate interface.

Gaussian knockoffs sample the matched-moments conditional normal directly.
The two copula kinds share the D-vine route: map observations to the unit
scale with fitted margins, Rosenblatt-transform through the first d
coordinates of a 2d-dimensional vine, append fresh uniforms, invert, and map
the last d coordinates back through the marginal quantiles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .dvine import (
    DVineModel,
    all_gaussian_dvine,
    compute_pits,
    fit_knockoff_dvine,
    kendall_tau_matrix,
    select_order,
    simulate,
)
from .exceptions import DataError, DomainError, FitError
from .margins import MarginalModel, MarginKind, fit_margin
from .pcvine import (
    build_H,
    conditional_gaussian,
    knockoff_s_vector,
    nearest_corr,
    psd_sqrt,
)

SCHEMA_VERSION = 1


class KnockoffKind(Enum):
    GAUSSIAN = "gaussian"
    GAUSSIAN_COPULA = "gausscop"
    VINE_COPULA = "vine"


@dataclass(frozen=True)
class KnockoffConfig:
    """Fitting options: marginal model kind and, for the vine kind, an
    explicit pair-copula candidate set as (family, rotation) tuples.

    ``margins`` may carry already-fitted marginal models (one per column) to
    share between machines fit on the same training data; they must equal
    what ``fit_margin`` would produce.
    """

    margin_kind: MarginKind = MarginKind.KDE
    families: tuple | None = None
    margins: tuple | None = None


@dataclass(frozen=True)
class KnockoffMachine:
    """A fitted knockoff generator; immutable, generation never mutates it."""

    kind: KnockoffKind
    d: int
    mean: np.ndarray | None = None
    cov: np.ndarray | None = None
    s: np.ndarray | None = None
    margins: tuple | None = None
    order: np.ndarray | None = None
    vine: DVineModel | None = None

    def to_dict(self) -> dict:
        rec = {"schema_version": SCHEMA_VERSION, "kind": self.kind.value, "d": self.d}
        if self.kind is KnockoffKind.GAUSSIAN:
            rec["mean"] = self.mean.tolist()
            rec["cov"] = self.cov.tolist()
            rec["s"] = self.s.tolist()
        else:
            rec["margins"] = [m.to_dict() for m in self.margins]
            rec["order"] = [int(v) for v in self.order]
            rec["vine"] = self.vine.to_dict()
        return rec

    @staticmethod
    def from_dict(rec: dict) -> "KnockoffMachine":
        if rec.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"unsupported model schema version {rec.get('schema_version')}")
        kind = KnockoffKind(rec["kind"])
        if kind is KnockoffKind.GAUSSIAN:
            return KnockoffMachine(
                kind, int(rec["d"]),
                mean=np.asarray(rec["mean"], dtype=float),
                cov=np.asarray(rec["cov"], dtype=float),
                s=np.asarray(rec["s"], dtype=float))
        return KnockoffMachine(
            kind, int(rec["d"]),
            margins=tuple(MarginalModel.from_dict(m) for m in rec["margins"]),
            order=np.asarray(rec["order"], dtype=int),
            vine=DVineModel.from_dict(rec["vine"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @staticmethod
    def load(path) -> "KnockoffMachine":
        with open(path) as fh:
            return KnockoffMachine.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# construction from known parameters (also used by the acceptance checks)
# ---------------------------------------------------------------------------

def gaussian_machine_from_params(mean, cov) -> KnockoffMachine:
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    d = mean.size
    sd = np.sqrt(np.diag(cov))
    corr = cov / np.outer(sd, sd)
    np.fill_diagonal(corr, 1.0)
    try:
        s_corr = knockoff_s_vector(corr)
    except DomainError as exc:
        raise FitError(
            "covariance is rank deficient; regularize the estimate") from exc
    return KnockoffMachine(KnockoffKind.GAUSSIAN, d, mean=mean, cov=cov,
                           s=s_corr * np.diag(cov))


def gausscop_machine_from_params(margins, corr, order=None) -> KnockoffMachine:
    corr = np.asarray(corr, dtype=float)
    d = corr.shape[0]
    r = knockoff_s_vector(corr)
    vine = all_gaussian_dvine(build_H(corr, r))
    order = np.arange(d) if order is None else np.asarray(order, dtype=int)
    return KnockoffMachine(KnockoffKind.GAUSSIAN_COPULA, d,
                           margins=tuple(margins), order=order, vine=vine)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def fit(kind, x_data, config: KnockoffConfig | None = None) -> KnockoffMachine:
    """Fit a knockoff machine of the requested kind to training data."""
    kind = KnockoffKind(kind) if not isinstance(kind, KnockoffKind) else kind
    config = config or KnockoffConfig()
    x = np.atleast_2d(np.asarray(x_data, dtype=float))
    n, d = x.shape
    if d < 2:
        raise DataError("need at least two variables")
    if np.any(~np.isfinite(x)):
        raise DataError("training data must be finite")

    if kind is KnockoffKind.GAUSSIAN:
        return gaussian_machine_from_params(x.mean(axis=0), np.cov(x.T, ddof=1))

    if config.margins is not None:
        if len(config.margins) != d:
            raise DomainError("precomputed margins must match the column count")
        margins = tuple(config.margins)
    else:
        margins = tuple(fit_margin(x[:, j], config.margin_kind) for j in range(d))
    tau = kendall_tau_matrix(x)
    r_hat = nearest_corr(np.sin(np.pi * tau / 2.0))
    if kind is KnockoffKind.GAUSSIAN_COPULA:
        return gausscop_machine_from_params(margins, r_hat)

    u = np.column_stack([margins[j].cdf(x[:, j]) for j in range(d)])
    order = select_order(u, tau_matrix=tau)
    tau_ord = tau[np.ix_(order, order)]
    vine = fit_knockoff_dvine(u[:, order], families=config.families,
                              tau_matrix=tau_ord)
    return KnockoffMachine(KnockoffKind.VINE_COPULA, d, margins=margins,
                           order=order, vine=vine)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def generate_with_uniforms(machine: KnockoffMachine, x, w_tilde) -> np.ndarray:
    """Copula-kind knockoffs from explicit uniform draws; fully deterministic."""
    if machine.kind is KnockoffKind.GAUSSIAN:
        raise DomainError("explicit-uniform generation applies to copula kinds only")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    if d != machine.d:
        raise DomainError(f"machine was fit for {machine.d} variables, got {d}")
    u = np.column_stack([machine.margins[j].cdf(x[:, j]) for j in range(d)])
    u_ord = u[:, machine.order]
    w = compute_pits(machine.vine, u_ord)
    joint = simulate(machine.vine, np.hstack([w, w_tilde]))
    ut = np.empty((n, d))
    ut[:, machine.order] = joint[:, d:]
    return np.column_stack([machine.margins[j].quantile(ut[:, j]) for j in range(d)])


def generate(machine: KnockoffMachine, x, rng) -> np.ndarray:
    """Generate one knockoff row per input row; pure given the rng stream."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    if d != machine.d:
        raise DomainError(f"machine was fit for {machine.d} variables, got {d}")

    if machine.kind is KnockoffKind.GAUSSIAN:
        mu, v = conditional_gaussian(machine.cov, machine.s, x - machine.mean)
        noise = rng.standard_normal((n, d)) @ psd_sqrt(v).T
        return machine.mean + mu + noise

    return generate_with_uniforms(machine, x, rng.uniform(size=(n, d)))
