"""Two-component additive BART and additive-treatment BART, continuous and binary."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._gibbs import beta_posterior
from .data import BINARY, CONTINUOUS, CovariateSplit, DataError, Dataset
from .sampler_continuous import (TREATMENT, TWO_BART, AdditiveFit, BartConfig, leaf_sd,
                                 run_model)


@dataclass(frozen=True)
class AdditiveConfig(BartConfig):
    """:class:`BartConfig` plus per-component tree count and the treatment-effect prior.

    ``m_per_component=None`` gives each component ``m // 2`` trees, so the
    additive model carries as many trees as the single model it is compared
    with. ``treatment_prior_var=None`` uses ``100 * s2 / sum(A^2)`` where
    ``s2`` is the sample variance of ``y`` (``pi^2 / 3`` for binary data).
    """

    m_per_component: Optional[int] = None
    treatment_prior_mean: float = 0.0
    treatment_prior_var: Optional[float] = None

    def __post_init__(self):
        super().__post_init__()
        if self.m_per_component is not None and self.m_per_component < 1:
            raise ValueError("m_per_component must be >= 1")
        if self.treatment_prior_var is not None and not self.treatment_prior_var > 0:
            raise ValueError("treatment_prior_var must be positive")

    @property
    def trees_per_component(self) -> int:
        return self.m_per_component if self.m_per_component is not None else max(1, self.m // 2)


def _as_additive(config: BartConfig) -> AdditiveConfig:
    if isinstance(config, AdditiveConfig):
        return config
    return AdditiveConfig.from_dict(config.to_dict())


def _two_bart(data, split, config, kind, x_test, monitor):
    if data.response_kind != kind:
        raise DataError(f"expected a {kind} response, got {data.response_kind}")
    split.validate(data.p)
    config = _as_additive(config)
    mc = config.trees_per_component
    sd = leaf_sd(kind, config.k, 2 * mc)
    spec = [("minus", list(split.minus_indices), mc, sd),
            ("plus", list(split.plus_indices), mc, sd)]
    fit = run_model(data, config, TWO_BART, spec, split=split, x_test=x_test, monitor=monitor)
    fit.config["m_per_component"] = mc
    return fit


def _treatment(data, treatment_column, config, kind, x_test, monitor):
    if data.response_kind != kind:
        raise DataError(f"expected a {kind} response, got {data.response_kind}")
    if not 0 <= treatment_column < data.p:
        raise DataError(f"treatment column {treatment_column} out of range for p={data.p}")
    config = _as_additive(config)
    cols = [j for j in range(data.p) if j != treatment_column]
    if not cols:
        raise DataError("treatment model needs at least one covariate besides the treatment")
    spec = [("f", cols, config.m, leaf_sd(kind, config.k, config.m))]
    return run_model(data, config, TREATMENT, spec, treatment_column=treatment_column,
                     treatment_prior=(config.treatment_prior_mean, config.treatment_prior_var),
                     x_test=x_test, monitor=monitor)


def fit_two_bart(data: Dataset, split: CovariateSplit, config: BartConfig = AdditiveConfig(),
                 *, x_test=None, monitor=None) -> AdditiveFit:
    """``y = f1(x-) + f2(x+) + e``, each component a BART on its own covariate block."""
    return _two_bart(data, split, config, CONTINUOUS, x_test, monitor)


def fit_two_bart_binary(data: Dataset, split: CovariateSplit,
                        config: BartConfig = AdditiveConfig(), *, x_test=None,
                        monitor=None) -> AdditiveFit:
    """``P(Y = 1 | x) = F(f1(x-) + f2(x+))`` with F the logistic CDF."""
    return _two_bart(data, split, config, BINARY, x_test, monitor)


def fit_treatment_bart(data: Dataset, treatment_column: int,
                       config: BartConfig = AdditiveConfig(), *, x_test=None,
                       monitor=None) -> AdditiveFit:
    """``y = beta * A + f(x) + e`` with ``A`` the treatment column, excluded from ``f``."""
    return _treatment(data, treatment_column, config, CONTINUOUS, x_test, monitor)


def fit_treatment_bart_binary(data: Dataset, treatment_column: int,
                              config: BartConfig = AdditiveConfig(), *, x_test=None,
                              monitor=None) -> AdditiveFit:
    """``P(Y = 1 | x) = F(beta * A + f(x))``."""
    return _treatment(data, treatment_column, config, BINARY, x_test, monitor)


def treatment_posterior(resid, a, sigma2: float, mu0: float, var0: float) -> tuple[float, float]:
    """Mean and variance of ``beta`` given ``resid = y - f(x)`` under Gaussian errors."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    a = np.asarray(a, dtype=float)
    return beta_posterior(np.asarray(resid, dtype=float), a, np.full(a.shape, 1.0 / sigma2),
                          mu0, var0)


def treatment_posterior_binary(z_plus, a, lam, mu0: float, var0: float) -> tuple[float, float]:
    """``(B, V)`` for ``beta`` given latent residuals ``z+ = z - f(x)`` and mixture variances."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("mixture variances must be positive")
    return beta_posterior(np.asarray(z_plus, dtype=float), np.asarray(a, dtype=float),
                          1.0 / lam, mu0, var0)


def treatment_summary(fit: AdditiveFit, level: float = 0.95) -> tuple[float, float, float]:
    """Posterior mean and equal-tailed credible interval of the treatment effect."""
    if fit.beta is None:
        raise ValueError("fit has no treatment effect")
    lo, hi = np.quantile(fit.beta, [(1 - level) / 2, (1 + level) / 2])
    return float(np.mean(fit.beta)), float(lo), float(hi)


def prior_fit_variance(kind: str, k: float, trees: int, components: int = 1) -> float:
    """Prior variance of the summed fit: ``components * trees`` leaves of variance leaf_sd^2."""
    sd = leaf_sd(kind, k, components * trees)
    return components * trees * sd * sd


__all__ = ["AdditiveConfig", "fit_two_bart", "fit_two_bart_binary", "fit_treatment_bart",
           "fit_treatment_bart_binary", "treatment_posterior", "treatment_posterior_binary",
           "treatment_summary", "prior_fit_variance"]
