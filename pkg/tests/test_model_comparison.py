import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from addbart.additive_models import AdditiveConfig
from addbart.data import BINARY, CovariateSplit, DataError, Dataset, FoldAssignment, make_folds
from addbart.model_comparison import (ComparisonReport, ModelFitter, compare_additivity,
                                      comparison_fitters, compute_cpo, compute_lpml, compute_ospe,
                                      cpo_from_loglik, lpml_of, psbf_verdict, r_ospe)
from addbart.sampler_continuous import BartConfig, fit_bart

FAST = BartConfig(m=20, burn_in=60, draws=60, seed=3)


# --- CPO / LPML -------------------------------------------------------------


def test_cpo_constant_column():
    cpo = compute_cpo(np.full((7, 3), 0.4))
    np.testing.assert_allclose(cpo.values, 0.4, rtol=1e-14)


def test_cpo_two_draws():
    cpo = compute_cpo(np.array([[0.5], [0.25]]))
    assert cpo.values[0] == pytest.approx(1 / 3, rel=1e-14)


def test_lpml_examples():
    assert compute_lpml(compute_cpo(np.ones((4, 5)))) == 0.0
    cpo = compute_cpo(np.array([[math.exp(-1), math.exp(-2)]] * 3))
    assert compute_lpml(cpo) == pytest.approx(-3.0, abs=1e-13)
    assert len(cpo) == 2


def test_cpo_conjugate_normal_mean_loo():
    # y_i ~ N(mu, 1), mu ~ N(0, tau2); closed-form leave-one-out predictive
    rng = np.random.default_rng(0)
    n, tau2, S = 5, 4.0, 100_000
    y = rng.normal(0.7, 1.0, n)
    v = 1.0 / (n + 1.0 / tau2)
    mu = rng.normal(v * y.sum(), math.sqrt(v), S)
    cpo = cpo_from_loglik(stats.norm.logpdf(y[None, :], mu[:, None], 1.0)).values
    for i in range(n):
        v_i = 1.0 / (n - 1 + 1.0 / tau2)
        m_i = v_i * (y.sum() - y[i])
        want = stats.norm.pdf(y[i], m_i, math.sqrt(1.0 + v_i))
        assert abs(cpo[i] / want - 1) < 0.02


def test_cpo_extreme_underflow_matches_mpmath():
    ll = np.array([[-700.0, -1.0], [-690.5, -2.5], [-702.25, -0.1]])
    got = cpo_from_loglik(ll).log_cpo
    mpmath.mp.dps = 50
    for i in range(2):
        hm = sum(mpmath.exp(-mpmath.mpf(v)) for v in ll[:, i]) / 3
        want = float(-mpmath.log(hm))
        assert abs(got[i] - want) < 1e-10 * abs(want)
    assert np.all(np.isfinite(got))
    # the density form agrees where the density is representable
    np.testing.assert_allclose(compute_cpo(np.exp(ll)).log_cpo, got, rtol=1e-10)


def test_lpml_linear_in_n():
    # iid N(0,1) data under the true model: LPML/n -> E log phi(Y) = -0.5 log(2 pi) - 0.5
    rng = np.random.default_rng(1)
    y = rng.standard_normal(20_000)
    ll = np.tile(stats.norm.logpdf(y), (3, 1))
    slope = cpo_from_loglik(ll).lpml / y.size
    assert abs(slope - (-0.5 * math.log(2 * math.pi) - 0.5)) < 0.02


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
def test_cpo_permutation_invariant(S, n, seed):
    rng = np.random.default_rng(seed)
    ll = rng.uniform(-50, 0, (S, n))
    a = cpo_from_loglik(ll).log_cpo
    b = cpo_from_loglik(ll[rng.permutation(S)]).log_cpo
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)
    # harmonic mean lies between the smallest and largest likelihood
    assert np.all(a <= ll.max(axis=0) + 1e-12) and np.all(a >= ll.min(axis=0) - 1e-12)


def test_cpo_errors():
    with pytest.raises(ValueError):
        compute_cpo(np.array([[0.5, 0.0]]))
    with pytest.raises(ValueError):
        cpo_from_loglik(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        cpo_from_loglik(np.ones(3))


# --- PsBF -------------------------------------------------------------------


def test_psbf_decisive_example():
    v = psbf_verdict(math.log(25638.04), 0.0)
    assert v.psbf == pytest.approx(25638.04, rel=1e-12)
    assert v.verdict == "decisive" and v.favors == "first"


def test_psbf_strong_for_other():
    v = psbf_verdict(math.log(0.09521), 0.0)
    assert v.verdict == "strong" and v.favors == "second"


def test_psbf_one_is_indifferent():
    v = psbf_verdict(-12.5, -12.5)
    assert v.psbf == 1.0 and v.verdict == "indifferent" and v.favors == "neither"


@pytest.mark.parametrize("psbf, band", [
    (2.9, "indifferent"), (3.1, "substantial"), (9.9, "substantial"), (10.5, "strong"),
    (29.0, "strong"), (31.0, "very_strong"), (99.0, "very_strong"), (101.0, "decisive"),
])
def test_jeffreys_bands(psbf, band):
    assert psbf_verdict(math.log(psbf), 0.0).verdict == band
    assert psbf_verdict(0.0, math.log(psbf)).verdict == band


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4))
def test_psbf_symmetry(a, b):
    ab, ba = psbf_verdict(a, b), psbf_verdict(b, a)
    assert ab.log10_psbf == -ba.log10_psbf
    assert ab.verdict == ba.verdict
    mirror = {"first": "second", "second": "first", "neither": "neither"}
    assert mirror[ab.favors] == ba.favors
    if abs(a - b) < 700:
        assert ab.psbf * ba.psbf == pytest.approx(1.0, rel=1e-12)
        assert ab.psbf == pytest.approx(math.exp(a - b), rel=1e-15)


def test_psbf_rejects_nonfinite():
    with pytest.raises(ValueError):
        psbf_verdict(math.inf, 0.0)


# --- OSPE -------------------------------------------------------------------


def _toy(n=10, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.standard_normal(n), rng.standard_normal((n, 2)), ("a", "b"))


def test_ospe_oracle_predictor():
    d = _toy(30)
    lookup = {tuple(r): y for r, y in zip(d.x, d.y)}
    ospe = compute_ospe(d, lambda tr, xt: np.array([lookup[tuple(r)] for r in xt]),
                        make_folds(30, 5, 0))
    assert ospe == 0.0


def test_ospe_constant_predictor():
    rng = np.random.default_rng(1)
    y = rng.standard_normal(5000)
    d = Dataset((y - y.mean()) / y.std(), np.zeros((5000, 1)), ("z",))
    ospe = compute_ospe(d, lambda tr, xt: np.full(len(xt), tr.y.mean()), make_folds(5000, 5, 1))
    assert abs(ospe - 1.0) < 0.01


def test_ospe_hand_computed():
    y = np.arange(10.0)
    d = Dataset(y, np.zeros((10, 1)), ("z",))
    folds = FoldAssignment(5, np.array([1, 1, 2, 2, 3, 3, 4, 4, 5, 5]))
    # predict the training mean: fold k leaves out {2k-2, 2k-1}
    ospe = compute_ospe(d, lambda tr, xt: np.full(len(xt), tr.y.mean()), folds)
    errs = []
    for k in range(5):
        held = [2 * k, 2 * k + 1]
        mu = np.delete(y, held).mean()
        errs += [(y[i] - mu) ** 2 for i in held]
    assert ospe == pytest.approx(np.mean(errs), rel=1e-14)


def test_ospe_fold_label_invariance():
    d = _toy(20, seed=2)
    folds = make_folds(20, 4, 5)
    relabel = FoldAssignment(4, 5 - folds.assignment)
    f = lambda tr, xt: np.full(len(xt), tr.y.mean() + 0.1 * tr.y.std())  # noqa: E731
    assert compute_ospe(d, f, folds) == pytest.approx(compute_ospe(d, f, relabel), rel=1e-14)


def test_ospe_binary_brier():
    y = np.array([1.0, 0.0, 1.0, 1.0, 0.0, 0.0])
    d = Dataset(y, np.zeros((6, 1)), ("z",), BINARY)
    folds = FoldAssignment(3, np.array([1, 2, 3, 1, 2, 3]))
    brier = compute_ospe(d, lambda tr, xt: np.full(len(xt), 0.25), folds)
    assert brier == pytest.approx(np.mean((y - 0.25) ** 2))
    miss = compute_ospe(d, lambda tr, xt: np.full(len(xt), 0.25), folds,
                        binary_loss="misclassification")
    assert miss == pytest.approx(0.5)


def test_ospe_size_mismatch():
    with pytest.raises(DataError):
        compute_ospe(_toy(10), lambda tr, xt: np.zeros(len(xt)), make_folds(12, 3, 0))


@pytest.mark.parametrize("num, den, want", [(2.0, 1.0, 2.0), (1.3, 1.3, 1.0), (0.8, 1.0, 0.8)])
def test_r_ospe(num, den, want):
    assert r_ospe(num, den) == pytest.approx(want, rel=1e-15)


def test_r_ospe_zero_denominator():
    with pytest.raises(ZeroDivisionError):
        r_ospe(1.0, 0.0)


# --- driver -----------------------------------------------------------------


def _additive_data(n=120, seed=4):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (n, 3))
    y = 2 * x[:, 0] + np.sin(3 * x[:, 2]) + 0.3 * rng.standard_normal(n)
    return Dataset(y, x, ("a", "b", "c"))


def test_self_comparison_is_exactly_one():
    d = _additive_data(60)
    a, b = fit_bart(d, FAST), fit_bart(d, FAST)
    v = psbf_verdict(lpml_of(a), lpml_of(b))
    assert v.psbf == 1.0 and v.verdict == "indifferent"


def test_compare_report_fields_and_json():
    d = _additive_data()
    report = compare_additivity(d, CovariateSplit((0, 1), (2,)), FAST, with_ospe=True, n_folds=3)
    assert report.psbf == pytest.approx(math.exp(report.lpml_nonadditive - report.lpml_additive),
                                        rel=1e-12)
    assert report.model == "two_bart"
    assert report.r_ospe == pytest.approx(report.ospe_nonadditive / report.ospe_additive)
    back = json.loads(report.to_json())
    assert set(back) == set(ComparisonReport.__dataclass_fields__)
    assert back["configs"]["additive"]["m_per_component"] == 10
    line = report.verdict_line()
    assert line.startswith("PsBF = ") and " → " in line
    assert "supports" in report.ospe_line()


def test_draw_parity_enforced():
    d = _additive_data(40)
    with pytest.raises(ValueError):
        comparison_fitters(d, CovariateSplit((0,), (1, 2)), FAST,
                           AdditiveConfig.from_dict(FAST.replace(draws=10).to_dict()))


def test_target_type_checked():
    with pytest.raises(TypeError):
        comparison_fitters(_additive_data(40), "x", FAST)


def test_model_fitter_returns_posterior_mean():
    d = _additive_data(50)
    f = ModelFitter("single", FAST)
    pred = f(d, d.x[:4])
    fit = fit_bart(d, FAST, x_test=d.x[:4])
    np.testing.assert_array_equal(pred, fit.test_mean())


def _report(psbf, favors, verdict):
    return ComparisonReport("two_bart", "continuous", 0.0, 0.0, psbf, math.log10(psbf), verdict,
                            favors)


def test_verdict_line_format():
    assert (_report(25638.04, "nonadditive", "decisive").verdict_line()
            == "PsBF = 25638.04 → decisive evidence for NONADDITIVE")
    assert (_report(0.09521, "additive", "strong").verdict_line()
            == "PsBF = 0.09521 → strong evidence for ADDITIVE")
    assert "indifferent" in _report(1.0, "neither", "indifferent").verdict_line()
