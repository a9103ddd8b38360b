"""Model-X knockoffs via Gaussian, Gaussian-copula and vine-copula models."""

from .bicop import BivariateCopula, CopulaFamily, fit_mle, select_family, tau_to_par

__version__ = "0.1.0"

__all__ = [
    "BivariateCopula",
    "CopulaFamily",
    "fit_mle",
    "select_family",
    "tau_to_par",
    "__version__",
]
