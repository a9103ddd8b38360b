"""Data generating processes and the simulation-study driver.

Three covariate DGPs (AR(1) Gaussian, Gaussian copula with random non-normal
margins, truncated Clayton D-vine with the same margins), the sparse linear
response, and the replication loop: fit every knockoff machine on a fresh
training draw, generate knockoffs for an independent evaluation draw, run the
Lasso knockoff filter per signal level, score FDP/power and knockoff
diagnostics, and stream everything to CSV.

Randomness is split with counter-based seed sequences so results are
reproducible bit-for-bit regardless of the number of worker processes:

    margins stream        SeedSequence([seed, 0])
    train draw            SeedSequence([seed, 1, rep, 0])
    evaluation draw       SeedSequence([seed, 1, rep, 1])
    knockoff generation   SeedSequence([seed, 1, rep, 2, method_index])
    response per alpha    SeedSequence([seed, 1, rep, 3, alpha_index])
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass
from multiprocessing import get_context

import numpy as np
from scipy.special import ndtr
from scipy.stats import t as student_t

from . import knockoffs as ko
from .bicop import BivariateCopula, CopulaFamily, tau_to_par
from .diagnostics import diagnostics_report
from .dvine import DVineModel, simulate
from .exceptions import DataError, DomainError
from .knockoffs import KnockoffConfig, KnockoffKind
from .select import cv_lasso, knockoff_stats, knockoff_threshold, score

logger = logging.getLogger(__name__)

DGP_NAMES = ("gaussian", "gauss-copula", "clayton-vine")
METHOD_NAMES = ("gaussian", "gausscop", "vine")

RESULT_COLUMNS = ("dgp", "method", "alpha", "replication", "fdp", "power",
                  "n_selected", "ks_average", "mmd_full_swap")


# ---------------------------------------------------------------------------
# randomly drawn true margins (Gaussian mixture / Student-t / Exponential)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MixtureNormalMargin:
    means: tuple
    sds: tuple

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.mean([ndtr((x - m) / s) for m, s in zip(self.means, self.sds)], axis=0)

    def ppf(self, u):
        u = np.asarray(u, dtype=float)
        lo = np.full(u.shape, min(self.means) - 10.0 * max(self.sds))
        hi = np.full(u.shape, max(self.means) + 10.0 * max(self.sds))
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid) < u
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)


@dataclass(frozen=True)
class StudentTMargin:
    df: float
    loc: float
    scale: float

    def cdf(self, x):
        return student_t.cdf(x, self.df, loc=self.loc, scale=self.scale)

    def ppf(self, u):
        return student_t.ppf(u, self.df, loc=self.loc, scale=self.scale)


@dataclass(frozen=True)
class ExponentialMargin:
    rate: float

    def cdf(self, x):
        return -np.expm1(-self.rate * np.maximum(np.asarray(x, dtype=float), 0.0))

    def ppf(self, u):
        return -np.log1p(-np.asarray(u, dtype=float)) / self.rate


def _draw_inv_wishart_1d(rng):
    # inverse-Wishart(Psi=1, nu=3) on a 1x1 scale is inverse-Gamma(3/2, 1/2)
    return 1.0 / rng.gamma(1.5, 2.0)


def draw_random_margins(d, rng):
    """One random margin per variable, drawn once per DGP instance."""
    margins = []
    for _ in range(d):
        which = rng.integers(3)
        if which == 0:
            means = tuple(rng.normal(0.0, 2.0) for _ in range(3))
            sds = tuple(np.sqrt(_draw_inv_wishart_1d(rng)) for _ in range(3))
            margins.append(MixtureNormalMargin(means, sds))
        elif which == 1:
            margins.append(StudentTMargin(3.0, rng.normal(0.0, 2.0),
                                          np.sqrt(_draw_inv_wishart_1d(rng))))
        else:
            margins.append(ExponentialMargin(rng.gamma(2.0, 1.0)))
    return margins


# ---------------------------------------------------------------------------
# covariate DGPs
# ---------------------------------------------------------------------------

def toeplitz_corr(d, rho):
    idx = np.arange(d)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def dgp_gaussian(d, rho, n, rng):
    """AR(1) Toeplitz Gaussian covariates."""
    if not -1.0 < rho < 1.0:
        raise DomainError("rho must lie in (-1, 1)")
    chol = np.linalg.cholesky(toeplitz_corr(d, rho))
    return rng.standard_normal((n, d)) @ chol.T


def dgp_gauss_copula(d, rho, margins, n, rng):
    """Gaussian copula with AR(1) correlation and the given margins."""
    u = ndtr(dgp_gaussian(d, rho, n, rng))
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return np.column_stack([margins[j].ppf(u[:, j]) for j in range(d)])


def clayton_vine_model(d, tau, n_trees=5) -> DVineModel:
    """Truncated Clayton D-vine: theta_t = theta_1 / (1 + (t-1) theta_1) in
    trees 1..n_trees, independence copulas above."""
    if not 0.0 < tau < 1.0:
        raise DomainError("tau must lie in (0, 1)")
    theta1 = tau_to_par(CopulaFamily.CLAYTON, tau)
    indep = BivariateCopula(CopulaFamily.INDEPENDENCE)
    trees = []
    for t in range(1, d):
        if t <= n_trees:
            th = theta1 / (1.0 + (t - 1) * theta1)
            trees.append([BivariateCopula(CopulaFamily.CLAYTON, 0, th)] * (d - t))
        else:
            trees.append([indep] * (d - t))
    return DVineModel(d, trees)


def dgp_clayton_vine(d, tau, margins, n, rng):
    """Truncated Clayton vine copula with the given margins."""
    model = clayton_vine_model(d, tau)
    u = simulate(model, rng.uniform(size=(n, d)))
    return np.column_stack([margins[j].ppf(u[:, j]) for j in range(d)])


def make_response(x, alpha, n_nonzero, rng):
    """Sparse linear response: random support, random signs, magnitudes
    alpha / sqrt(n), unit Gaussian noise."""
    x = np.asarray(x, dtype=float)
    n, d = x.shape
    if n_nonzero > d:
        raise DomainError("cannot place more nonzero coefficients than variables")
    support = np.sort(rng.choice(d, size=n_nonzero, replace=False))
    signs = rng.choice([-1.0, 1.0], size=n_nonzero)
    beta = np.zeros(d)
    beta[support] = signs * alpha / np.sqrt(n)
    y = x @ beta + rng.standard_normal(n)
    return y, beta, support


# ---------------------------------------------------------------------------
# experiment configuration and loop
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    dgp: str = "gaussian"
    d: int = 20
    n: int = 200
    m: int = 2000
    dependence: float = 0.7  # rho for the Gaussian DGPs, tau for the Clayton vine
    alphas: tuple = (3.0, 6.0, 9.0, 12.0, 15.0)
    n_nonzero: int = 10
    q: float = 0.1
    replications: int = 100
    seed: int = 1
    methods: tuple = METHOD_NAMES
    output: str | None = None

    def __post_init__(self):
        if self.dgp not in DGP_NAMES:
            raise DomainError(f"dgp must be one of {DGP_NAMES}")
        if self.d < 2 or self.n < 1 or self.m < 1 or self.replications < 1:
            raise DomainError("d >= 2 and n, m, replications >= 1 required")
        if not 0.0 < self.q < 1.0:
            raise DomainError("q must lie in (0, 1)")
        bad = [m for m in self.methods if m not in METHOD_NAMES]
        if bad:
            raise DomainError(f"unknown methods {bad}; choose from {METHOD_NAMES}")
        self.alphas = tuple(float(a) for a in self.alphas)
        self.methods = tuple(self.methods)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)

    @staticmethod
    def from_json(path) -> "ExperimentConfig":
        with open(path) as fh:
            rec = json.load(fh)
        known = set(ExperimentConfig.__dataclass_fields__)
        unknown = set(rec) - known
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        return ExperimentConfig(**rec)


_METHOD_KINDS = {
    "gaussian": KnockoffKind.GAUSSIAN,
    "gausscop": KnockoffKind.GAUSSIAN_COPULA,
    "vine": KnockoffKind.VINE_COPULA,
}


def _stream(seed, *path):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, path)]))


def _draw_covariates(config, margins, n, rng):
    if config.dgp == "gaussian":
        return dgp_gaussian(config.d, config.dependence, n, rng)
    if config.dgp == "gauss-copula":
        return dgp_gauss_copula(config.d, config.dependence, margins, n, rng)
    return dgp_clayton_vine(config.d, config.dependence, margins, n, rng)


def _run_replication(config, margins, rep):
    t_start = time.perf_counter()
    x_train = _draw_covariates(config, margins, config.m, _stream(config.seed, 1, rep, 0))
    x_eval = _draw_covariates(config, margins, config.n, _stream(config.seed, 1, rep, 1))
    rows = []
    ko_config = KnockoffConfig()
    if {"gausscop", "vine"} <= set(config.methods):
        # both copula machines use identical KDE margins; fit them once
        from .margins import fit_margin
        shared = tuple(fit_margin(x_train[:, j]) for j in range(config.d))
        ko_config = KnockoffConfig(margins=shared)
    for m_idx, method in enumerate(config.methods):
        machine = ko.fit(_METHOD_KINDS[method], x_train, ko_config)
        xt = ko.generate(machine, x_eval, _stream(config.seed, 1, rep, 2, m_idx))
        diag = diagnostics_report(x_eval, xt)
        x_aug = np.hstack([x_eval, xt])
        col_sd = x_aug.std(axis=0)
        for a_idx, alpha in enumerate(config.alphas):
            y, _, support = make_response(x_eval, alpha, config.n_nonzero,
                                          _stream(config.seed, 1, rep, 3, a_idx))
            _, beta = cv_lasso(x_aug, y)
            w = knockoff_stats(beta * col_sd)
            _, selected = knockoff_threshold(w, config.q)
            fdp, power = score(selected, support, d=config.d)
            rows.append({
                "dgp": config.dgp, "method": method, "alpha": alpha,
                "replication": rep, "fdp": fdp, "power": power,
                "n_selected": int(selected.size),
                "ks_average": diag.ks_average,
                "mmd_full_swap": diag.mmd_full_swap,
            })
    return rows, time.perf_counter() - t_start


def _replication_worker(args):
    config, margins, rep = args
    try:
        return rep, _run_replication(config, margins, rep), None
    except Exception as exc:  # logged and counted by the caller, not fatal
        return rep, None, f"{type(exc).__name__}: {exc}"


def run_experiment(config: ExperimentConfig, threads: int = 1):
    """Run the full study; returns (rows, n_failures).

    Replications are independent and may run in parallel worker processes;
    the output row order and all random draws are independent of ``threads``.
    """
    margins = None
    if config.dgp != "gaussian":
        margins = draw_random_margins(config.d, _stream(config.seed, 0))
    tasks = [(config, margins, rep) for rep in range(config.replications)]
    if threads > 1:
        with get_context("fork").Pool(processes=threads) as pool:
            outcomes = pool.map(_replication_worker, tasks)
    else:
        outcomes = [_replication_worker(t) for t in tasks]
    rows, failures = [], 0
    for rep, payload, err in outcomes:
        if err is not None:
            failures += 1
            logger.warning("replication %d failed: %s", rep, err)
            continue
        rep_rows, elapsed = payload
        logger.debug("replication %d finished in %.2fs", rep, elapsed)
        rows.extend(rep_rows)
    if failures:
        logger.warning("%d of %d replications failed", failures, config.replications)
    return rows, failures


def write_results(rows, path) -> None:
    """Stream result rows to CSV with a fixed column order."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v
                             for k, v in row.items()})


def read_results(path) -> list:
    with open(path) as fh:
        return list(csv.DictReader(fh))
