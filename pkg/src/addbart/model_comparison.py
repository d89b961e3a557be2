"""CPO/LPML, pseudo Bayes factors, cross-validated prediction error and the additivity driver."""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .additive_models import (AdditiveConfig, fit_treatment_bart, fit_treatment_bart_binary,
                              fit_two_bart, fit_two_bart_binary)
from .data import BINARY, CovariateSplit, DataError, Dataset, FoldAssignment, make_folds
from .sampler_continuous import SINGLE, TREATMENT, TWO_BART, BartConfig, ModelFit, fit_bart
from .sampler_logit import fit_logit_bart

# (lower edge of |log10 PsBF|, band) from weakest to strongest
BANDS = (
    (0.0, "barely_worth_mentioning"),
    (math.log10(3.0), "substantial"),
    (1.0, "strong"),
    (math.log10(30.0), "very_strong"),
    (2.0, "decisive"),
)
BAND_TEXT = {
    "barely_worth_mentioning": "barely worth mentioning",
    "substantial": "substantial evidence",
    "strong": "strong evidence",
    "very_strong": "very strong evidence",
    "decisive": "decisive evidence",
}
INDIFFERENT = "indifferent"


@dataclass(frozen=True)
class CpoVector:
    log_cpo: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_cpo)

    @property
    def lpml(self) -> float:
        return float(np.sum(self.log_cpo))

    def __len__(self):
        return self.log_cpo.shape[0]


def cpo_from_loglik(loglik) -> CpoVector:
    """Harmonic-mean CPO from an ``S x n`` matrix of per-draw log likelihoods.

    ``log CPO_i = log S - logsumexp_s(-loglik[s, i])``.
    """
    ll = np.asarray(loglik, dtype=float)
    if ll.ndim != 2 or ll.shape[0] < 1:
        raise ValueError("expected an S x n matrix of log likelihoods")
    if np.any(np.isnan(ll)) or np.any(ll == np.inf) or np.any(ll == -np.inf):
        raise ValueError("log likelihoods must be finite")
    return CpoVector(math.log(ll.shape[0]) - logsumexp(-ll, axis=0))


def compute_cpo(likelihood) -> CpoVector:
    """Harmonic-mean CPO from an ``S x n`` matrix of per-draw densities or masses."""
    lik = np.asarray(likelihood, dtype=float)
    if lik.ndim != 2:
        raise ValueError("expected an S x n likelihood matrix")
    if np.any(~np.isfinite(lik)) or np.any(lik <= 0):
        raise ValueError("likelihood entries must be strictly positive and finite")
    return cpo_from_loglik(np.log(lik))


def compute_lpml(cpo: CpoVector) -> float:
    return cpo.lpml


def lpml_of(fit: ModelFit) -> float:
    return cpo_from_loglik(fit.loglik).lpml


@dataclass(frozen=True)
class Verdict:
    psbf: float
    log10_psbf: float
    band: str  # Jeffreys band of max(PsBF, 1/PsBF)
    favors: str  # "first", "second" or "neither"

    @property
    def verdict(self) -> str:
        return INDIFFERENT if self.favors == "neither" else self.band


def psbf_verdict(lpml_a: float, lpml_b: float) -> Verdict:
    """``PsBF = exp(lpml_a - lpml_b)`` classified on the Jeffreys scale."""
    if not (math.isfinite(lpml_a) and math.isfinite(lpml_b)):
        raise ValueError("LPML values must be finite")
    diff = lpml_a - lpml_b
    log10 = diff / math.log(10.0)
    try:
        psbf = math.exp(diff)
    except OverflowError:
        psbf = math.inf
    strength = abs(log10)
    band = BANDS[0][1]
    for edge, name in BANDS:
        if strength >= edge:
            band = name
    if band == BANDS[0][1]:
        favors = "neither"
    else:
        favors = "first" if diff > 0 else "second"
    return Verdict(psbf, log10, band, favors)


def r_ospe(ospe_nonadd: float, ospe_add: float) -> float:
    """Ratio ``OSPE_nonadd / OSPE_add``; values above 1 support additivity."""
    if ospe_add == 0:
        raise ZeroDivisionError("additive OSPE is zero")
    if ospe_nonadd < 0 or ospe_add < 0:
        raise ValueError("OSPE values must be nonnegative")
    return ospe_nonadd / ospe_add


# ---------------------------------------------------------------------------
# cross-validation


@dataclass(frozen=True)
class ModelFitter:
    """Picklable fitter: trains one model and returns posterior-mean predictions at test rows."""

    model: str
    config: BartConfig
    split: Optional[CovariateSplit] = None
    treatment_column: Optional[int] = None

    def fit(self, data: Dataset, x_test=None) -> ModelFit:
        binary = data.response_kind == BINARY
        if self.model == SINGLE:
            f = fit_logit_bart if binary else fit_bart
            return f(data, self.config, x_test=x_test)
        if self.model == TWO_BART:
            f = fit_two_bart_binary if binary else fit_two_bart
            return f(data, self.split, self.config, x_test=x_test)
        if self.model == TREATMENT:
            f = fit_treatment_bart_binary if binary else fit_treatment_bart
            return f(data, self.treatment_column, self.config, x_test=x_test)
        raise ValueError(f"unknown model {self.model!r}")

    def __call__(self, train: Dataset, x_test) -> np.ndarray:
        return self.fit(train, x_test).test_mean()


def _fold_predictions(args):
    fitter, data, fold_rows = args
    train_rows, test_rows = fold_rows
    return fitter(data.subset(train_rows), data.x[test_rows])


def compute_ospe(data: Dataset, fitter: Callable, folds: FoldAssignment, *, jobs: int = 1,
                 binary_loss: str = "brier") -> float:
    """Pooled held-out squared error over the folds.

    For binary data the prediction is the posterior-mean event probability
    (Brier score); ``binary_loss="misclassification"`` thresholds it at 1/2.
    """
    if folds.assignment.shape[0] != data.n:
        raise DataError(f"fold assignment covers {folds.assignment.shape[0]} rows, "
                        f"data has {data.n}")
    if binary_loss not in ("brier", "misclassification"):
        raise ValueError(f"unknown binary loss {binary_loss!r}")
    tasks = [(fitter, data, (folds.train_rows(k), folds.test_rows(k)))
             for k in range(1, folds.k + 1)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            preds = list(pool.map(_fold_predictions, tasks))
    else:
        preds = [_fold_predictions(t) for t in tasks]
    sq = np.empty(data.n)
    for (_, _, (_, test_rows)), yhat in zip(tasks, preds):
        yhat = np.asarray(yhat, dtype=float)
        if data.response_kind == BINARY and binary_loss == "misclassification":
            yhat = (yhat > 0.5).astype(float)
        sq[test_rows] = (data.y[test_rows] - yhat) ** 2
    return float(sq.mean())


# ---------------------------------------------------------------------------
# additivity comparison


@dataclass
class ComparisonReport:
    model: str  # "two_bart" or "treatment"
    response_kind: str
    lpml_nonadditive: float
    lpml_additive: float
    psbf: float
    log10_psbf: float
    verdict: str
    favors: str  # "nonadditive", "additive" or "neither"
    ospe_nonadditive: Optional[float] = None
    ospe_additive: Optional[float] = None
    r_ospe: Optional[float] = None
    seeds: dict = field(default_factory=dict)
    configs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def verdict_line(self) -> str:
        p = self.psbf
        shown = f"{p:.2f}" if p >= 1 else f"{p:.4g}"
        if self.favors == "neither":
            return f"PsBF = {shown} → barely worth mentioning (indifferent)"
        return f"PsBF = {shown} → {BAND_TEXT[self.verdict]} for {self.favors.upper()}"

    def ospe_line(self) -> Optional[str]:
        if self.r_ospe is None:
            return None
        side = "ADDITIVE" if self.r_ospe > 1 else "NONADDITIVE" if self.r_ospe < 1 else "neither"
        return (f"R_OSPE = {self.r_ospe:.4f} (OSPE nonadditive {self.ospe_nonadditive:.6g}, "
                f"additive {self.ospe_additive:.6g}) → supports {side}")


def comparison_fitters(data: Dataset, target, config: BartConfig,
                       additive_config: BartConfig | None = None):
    """Nonadditive and additive :class:`ModelFitter` pair for a split or a treatment column."""
    if additive_config is None:
        additive_config = AdditiveConfig.from_dict(config.to_dict())
    if (config.draws, config.thin) != (additive_config.draws, additive_config.thin):
        raise ValueError("both models must keep the same number of posterior draws")
    single = ModelFitter(SINGLE, config)
    if isinstance(target, CovariateSplit):
        target.validate(data.p)
        return single, ModelFitter(TWO_BART, additive_config, split=target)
    if isinstance(target, (int, np.integer)) and not isinstance(target, bool):
        return single, ModelFitter(TREATMENT, additive_config, treatment_column=int(target))
    raise TypeError("target must be a CovariateSplit or a treatment column index")


def compare_additivity(data: Dataset, target, config: BartConfig = BartConfig(),
                       additive_config: BartConfig | None = None, *, with_ospe: bool = False,
                       folds: FoldAssignment | None = None, n_folds: int = 5,
                       jobs: int = 1) -> ComparisonReport:
    """Fit the single (nonadditive) and the additive model; report LPMLs, PsBF and optionally OSPE.

    PsBF is oriented nonadditive over additive.
    """
    single, additive = comparison_fitters(data, target, config, additive_config)
    fit_n = single.fit(data)
    fit_a = additive.fit(data)
    lp_n, lp_a = lpml_of(fit_n), lpml_of(fit_a)
    v = psbf_verdict(lp_n, lp_a)
    favors = {"first": "nonadditive", "second": "additive", "neither": "neither"}[v.favors]
    report = ComparisonReport(
        model=additive.model, response_kind=data.response_kind, lpml_nonadditive=lp_n,
        lpml_additive=lp_a, psbf=v.psbf, log10_psbf=v.log10_psbf, verdict=v.verdict,
        favors=favors, seeds={"nonadditive": single.config.seed, "additive": additive.config.seed},
        configs={"nonadditive": fit_n.config, "additive": fit_a.config})
    if with_ospe:
        if folds is None:
            folds = make_folds(data.n, n_folds, config.seed)
            report.seeds["folds"] = config.seed
        report.ospe_nonadditive = compute_ospe(data, single, folds, jobs=jobs)
        report.ospe_additive = compute_ospe(data, additive, folds, jobs=jobs)
        report.r_ospe = r_ospe(report.ospe_nonadditive, report.ospe_additive)
    return report
