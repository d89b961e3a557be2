"""Logistic BART via the Kolmogorov-Smirnov scale-mixture augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .data import BINARY, DataError, Dataset
from .sampler_continuous import SINGLE, BartConfig, ModelFit, leaf_sd, run_model


@dataclass
class LatentState:
    """Latent utilities ``z`` and mixture variances ``lam`` of the augmented logit model."""

    z: np.ndarray
    lam: np.ndarray

    @classmethod
    def initial(cls, y) -> "LatentState":
        y = np.asarray(y, dtype=float)
        return cls(np.where(y > 0.5, 0.5, -0.5), np.ones(y.shape[0]))

    def consistent_with(self, y) -> bool:
        y = np.asarray(y)
        pos = y > 0.5
        return bool(np.all(self.z[pos] > 0) and np.all(self.z[~pos] <= 0) and np.all(self.lam > 0))


def draw_truncated_normal(mean: float, variance: float, positive: bool,
                          rng: np.random.Generator) -> float:
    """Exact draw from N(mean, variance) restricted to ``(0, inf)`` or ``(-inf, 0]``."""
    if variance <= 0:
        raise ValueError("variance must be positive")
    sd = math.sqrt(variance)
    if positive:
        return float(K.truncnorm_positive(float(mean), sd, rng))
    return -float(K.truncnorm_positive(-float(mean), sd, rng))


def draw_truncated_normals(mean: float, variance: float, n: int,
                           rng: np.random.Generator) -> np.ndarray:
    """``n`` independent positive-side draws (vectorized form of :func:`draw_truncated_normal`)."""
    if variance <= 0:
        raise ValueError("variance must be positive")
    return K.truncnorm_many(float(mean), math.sqrt(variance), int(n), rng)


def draw_lambda(residual: float, rng: np.random.Generator) -> float:
    """Draw the mixture variance given a latent residual ``z - f``.

    Rejection sampler with a generalized inverse Gaussian proposal and
    alternating-series squeezes on the Kolmogorov-Smirnov density.
    """
    if not math.isfinite(residual):
        raise ValueError("residual must be finite")
    return float(K.lambda_draw(float(residual), rng))


def draw_lambdas(residuals, rng: np.random.Generator) -> np.ndarray:
    r = np.ascontiguousarray(residuals, dtype=float)
    if not np.all(np.isfinite(r)):
        raise ValueError("residuals must be finite")
    return K.lambda_draw_many(r, rng)


def fit_logit_bart(data: Dataset, config: BartConfig = BartConfig(), *, x_test=None,
                   monitor=None) -> ModelFit:
    """Single sum-of-trees logit model ``P(Y = 1 | x) = F(f(x))``."""
    if data.response_kind != BINARY:
        raise DataError("fit_logit_bart needs a binary response; use fit_bart")
    spec = [("f", list(range(data.p)), config.m, leaf_sd(BINARY, config.k, config.m))]
    return run_model(data, config, SINGLE, spec, x_test=x_test, monitor=monitor)
