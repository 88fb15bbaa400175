import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.stats import norm

from ctmle_cont.data import Dataset, DegenerateTreatmentError
from ctmle_cont.estimators import (
    DimensionError,
    aiptw,
    aiptw_with_ci,
    fit_working_model,
    gcomp,
    iptw,
    unadjusted,
    upsilon,
    wald_ci,
)
from ctmle_cont.targeting import OutcomeModel, eic_values, fluctuate_and_solve, scalar_clever

from .conftest import random_dataset


def const_g(value):
    return lambda w: np.full(len(np.atleast_2d(w)), value)


def _zeros(n, p=1):
    return np.zeros((n, p))


def test_unadjusted_examples():
    assert unadjusted(Dataset(_zeros(2), [1, 0], [1.0, 0.0])) == 1.0
    assert unadjusted(Dataset(_zeros(4), [1, 1, 0, 0], [1.0, 0.0, 1.0, 0.0])) == 0.0
    assert unadjusted(Dataset(_zeros(3), [1, 0, 1], [0.4] * 3)) == 0.0
    with pytest.raises(DegenerateTreatmentError):
        unadjusted(Dataset(_zeros(2), [1, 1], [0.2, 0.3]))


def test_gcomp_examples(small_dataset):
    assert gcomp(small_dataset, OutcomeModel.constant(0.7, 0.2)) == pytest.approx(0.5, abs=1e-15)
    assert gcomp(small_dataset, OutcomeModel.constant(0.4, 0.4)) == 0.0


def test_iptw_examples(small_dataset):
    assert iptw(Dataset(_zeros(2), [1, 0], [1.0, 0.0]), const_g(0.5)) == 1.0
    zero_y = Dataset(small_dataset.w, small_dataset.a, np.zeros(small_dataset.n))
    assert iptw(zero_y, const_g(0.3)) == 0.0
    d = small_dataset
    assert iptw(d, const_g(0.5)) == pytest.approx(2 * np.mean((2 * d.a - 1) * d.y), abs=1e-14)


def _fitted_g(dataset):
    coef = np.linspace(0.5, -0.5, dataset.p)

    def g(w):
        return 1 / (1 + np.exp(-(np.atleast_2d(w) @ coef)))

    return g


@given(seed=st.integers(0, 100_000))
def test_aiptw_reductions(seed):
    d = random_dataset(seed, n=50, p=3)
    g = _fitted_g(d)
    zero = OutcomeModel(lambda a, w: np.zeros(len(np.atleast_2d(w))), q_min=0.0)
    assert aiptw(d, zero, g) == pytest.approx(iptw(d, g), abs=1e-12)
    q = OutcomeModel(lambda a, w: 0.2 + 0.3 * a + 0.05 * np.tanh(w[:, 0]))
    exact = Dataset(d.w, d.a, q(d.a, d.w))
    assert aiptw(exact, q, g) == pytest.approx(gcomp(exact, q), abs=1e-12)


@given(seed=st.integers(0, 100_000))
def test_estimators_ignore_row_order(seed):
    d = random_dataset(seed, n=40, p=3)
    perm = np.random.default_rng(seed).permutation(d.n)
    e = Dataset(d.w[perm], d.a[perm], d.y[perm])
    g, q = _fitted_g(d), OutcomeModel.constant(0.6, 0.4)
    for f in (lambda x: unadjusted(x), lambda x: iptw(x, g), lambda x: aiptw(x, q, g), lambda x: gcomp(x, q)):
        assert f(d) == pytest.approx(f(e), abs=1e-12)


def test_targeted_fit_is_plug_in_and_matches_aiptw(small_dataset):
    g = _fitted_g(small_dataset)
    q0 = OutcomeModel(lambda a, w: 0.3 + 0.2 * a + 0.0 * w[:, 0])
    res = fluctuate_and_solve(small_dataset, q0, scalar_clever(g), g)
    assert res.psi == pytest.approx(gcomp(small_dataset, res.q_star), abs=1e-12)
    # D2* solved at (q*, g) makes A-IPTW and the plug-in coincide
    assert aiptw(small_dataset, res.q_star, g) == pytest.approx(res.psi, abs=1e-9)


def test_upsilon_examples(small_dataset):
    d = Dataset(_zeros(2), [1, 0], [0.6, 0.4])
    q = OutcomeModel.constant(0.5, 0.5)
    # D* = (2a-1)/0.5 * (y - 0.5) - psi = (0.2, 0.2) - 0.1 -> (0.1, 0.1)
    assert upsilon(d, q, const_g(0.5), 0.1) == pytest.approx(0.01)
    q_exact = OutcomeModel(lambda a, w: np.where(a == 1, 0.6, 0.4) * np.ones(len(w)))
    assert upsilon(d, q_exact, const_g(0.5), 0.2) == pytest.approx(0.0, abs=1e-20)
    g = _fitted_g(small_dataset)
    qm = OutcomeModel.constant(0.6, 0.3)
    dvals = eic_values(small_dataset, qm, g, 0.25)
    assert upsilon(small_dataset, qm, g, 0.25) == pytest.approx(np.mean(dvals**2), rel=1e-12)
    assert upsilon(small_dataset, qm, g, 0.25) >= np.mean(dvals) ** 2


def test_wald_ci_examples():
    ci = wald_ci(0.1, 0.04, 100)
    assert ci.se == pytest.approx(0.02)
    assert (ci.ci_low, ci.ci_high) == pytest.approx((0.1 - 0.0392, 0.1 + 0.0392), abs=1e-15)
    zero = wald_ci(0.3, 0.0, 10)
    assert zero.ci_low == zero.ci_high == 0.3
    assert wald_ci(0.0, 1.0, 400).width == pytest.approx(wald_ci(0.0, 1.0, 100).width / 2)
    with pytest.raises(ValueError):
        wald_ci(0.0, -1.0, 10)


def test_aiptw_ci_uses_centred_terms(small_dataset):
    g, q = _fitted_g(small_dataset), OutcomeModel.constant(0.6, 0.3)
    est = aiptw_with_ci(small_dataset, q, g)
    assert est.psi == pytest.approx(aiptw(small_dataset, q, g), abs=1e-15)
    assert est.se == pytest.approx(np.sqrt(upsilon(small_dataset, q, g, est.psi) / small_dataset.n), rel=1e-12)


def _wide(seed, n=120, y=None):
    gen = np.random.default_rng(seed)
    w = gen.normal(size=(n, 11))
    a = (gen.random(n) < 0.5).astype(int)
    a[:2] = (1, 0)
    if y is None:
        y = norm.cdf(0.3 * w[:, 2] - 0.2 * w[:, 5] + 0.2 * a + 0.3 * gen.normal(size=n))
    return Dataset(w, a, y)


def test_working_model_constant_half_outcome():
    d = _wide(1, y=np.full(120, 0.5))
    fit = fit_working_model(d)
    assert np.max(np.abs(fit.theta0)) <= 1e-12 and np.max(np.abs(fit.theta1)) <= 1e-12


@pytest.mark.parametrize("intercept", [False, True])
def test_working_model_is_stationary_and_matches_reference(intercept):
    d = _wide(2)
    fit = fit_working_model(d, intercept=intercept)
    assert np.max(np.abs(fit.gradient(d))) <= 1e-8
    for arm, theta, b in ((0, fit.theta0, fit.intercept0), (1, fit.theta1, fit.intercept1)):
        m = d.a == arm
        x = d.w[m][:, 2:10]
        if intercept:
            x = np.column_stack([np.ones(m.sum()), x])

        def risk(t, x=x, yy=d.y[m]):
            eta = x @ t
            return -np.mean(yy * norm.logcdf(eta) + (1 - yy) * norm.logcdf(-eta))

        ref = minimize(risk, np.zeros(x.shape[1]), method="BFGS", options={"gtol": 1e-10})
        ours = np.concatenate([[b], theta]) if intercept else theta
        assert risk(ours) <= ref.fun + 1e-12
        assert np.allclose(ours, ref.x, atol=1e-4)


def test_working_model_row_order_and_dimension():
    d = _wide(3)
    perm = np.random.default_rng(0).permutation(d.n)
    e = Dataset(d.w[perm], d.a[perm], d.y[perm])
    a, b = fit_working_model(d), fit_working_model(e)
    assert np.allclose(a.theta0, b.theta0, atol=1e-7) and np.allclose(a.theta1, b.theta1, atol=1e-7)
    with pytest.raises(DimensionError):
        fit_working_model(random_dataset(0, p=9))


def test_working_model_predictions_in_unit_interval():
    d = _wide(4)
    q = fit_working_model(d).as_outcome_model()
    vals = q(d.a, d.w)
    assert np.all((vals > 0) & (vals < 1))
    # only W3..W10 enter the prediction
    w2 = d.w.copy()
    w2[:, [0, 1, 10]] += 5.0
    assert np.array_equal(q(d.a, w2), vals)
