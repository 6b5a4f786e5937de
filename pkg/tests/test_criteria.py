import dataclasses
import math

import numpy as np
import pytest

from waicwbic import (
    REPORT_FIELDS,
    Chain,
    ConjugateNormalMeanModel,
    CriteriaError,
    Dataset,
    PriorShifted,
    SamplerConfig,
    bayes_generalization_loss,
    bayes_training_loss,
    conjugate_exact,
    criteria_report,
    empirical_loss,
    equation_of_state_residuals,
    expected_loss_mc,
    functional_variance,
    functionals,
    gibbs_generalization_loss,
    gibbs_training_loss,
    imai_lambda,
    linked_waic,
    linked_waic_general_beta,
    optimum_loss_estimate,
    run_chain,
    sample_truth,
    singular_fluctuation_hat,
    waic,
    wbic,
    wbic_beta,
)
from waicwbic.model_api import Model

MALA = SamplerConfig(algorithm="mala", step_size=0.05, n_steps=1500, burn_in=500, n_chains=8, seed=3)


class Identity(Model):
    """``log p(x|w) = w`` for every datum; lets tests choose log-densities directly."""

    parameter_dim = observation_dim = 1
    lower, upper = np.array([-1e4]), np.array([1e4])

    def log_density_matrix(self, X, W):
        return np.repeat(np.atleast_2d(W)[:, :1], len(X), axis=1)

    def log_prior(self, W):
        return np.zeros(np.atleast_2d(W).shape[0])


def chain_from(values, beta=1.0):
    v = np.asarray(values, dtype=float).reshape(1, -1)
    return Chain(beta=beta, draws=v[..., None], loglik_sum=v, log_prior=np.zeros_like(v), acceptance_rate=1.0,
                 seed=0, step_sizes=np.zeros(1))


def fake_pf(n, beta, E_nLn=0.0, V_nLn=0.0, var=None, pred=None, mean=None):
    base = functionals(Identity(), Dataset(np.zeros(n)), chain_from([0.0, 0.0], beta))
    changes = {"E_nLn": E_nLn, "V_nLn": V_nLn}
    if var is not None:
        changes["per_datum_logp_var"] = np.asarray(var, dtype=float)
    if pred is not None:
        changes["per_datum_pred_logp"] = np.asarray(pred, dtype=float)
    if mean is not None:
        changes["per_datum_logp_mean"] = np.asarray(mean, dtype=float)
    return dataclasses.replace(base, **changes)


@pytest.fixture(scope="module")
def point_setup():
    model = ConjugateNormalMeanModel(d=1, mu0=0.3)
    data = sample_truth(model, 50, seed=2)
    w_star = (0.25,)
    cfg = SamplerConfig(step_size=0.0, adapt=False, n_steps=20, burn_in=10, n_chains=2, init=w_star)
    pf_w = functionals(model, data, run_chain(model, data, wbic_beta(50), cfg))
    pf_1 = functionals(model, data, run_chain(model, data, 1.0, cfg))
    return model, data, w_star, pf_w, pf_1, cfg


def test_single_draw_chain():
    pf = functionals(Identity(), Dataset(np.zeros(3)), chain_from([-2.0]))
    np.testing.assert_array_equal(pf.per_datum_logp_var, 0.0)
    np.testing.assert_array_equal(pf.per_datum_pred_logp, pf.per_datum_logp_mean)


def test_two_draw_hand_arithmetic():
    pf = functionals(Identity(), Dataset(np.zeros(2)), chain_from([-1.0, -3.0]))
    np.testing.assert_allclose(pf.per_datum_logp_mean, -2.0, rtol=1e-15)
    np.testing.assert_allclose(pf.per_datum_logp_var, 2.0, rtol=1e-15)
    # log((e^-1 + e^-3) / 2), 50-digit reference
    np.testing.assert_allclose(pf.per_datum_pred_logp, -1.566219169516972813, rtol=1e-15)


def test_predictive_is_stable_for_extreme_log_densities():
    pf = functionals(Identity(), Dataset(np.zeros(2)), chain_from([-1400.0, -2100.0, -700.0]))
    assert np.all(np.isfinite(pf.per_datum_pred_logp))
    np.testing.assert_allclose(pf.per_datum_pred_logp, -700.0 - math.log(3), rtol=1e-14)


def test_non_finite_log_density_is_reported():
    class Bad(Identity):
        def log_density_matrix(self, X, W):
            out = super().log_density_matrix(X, W)
            out[1, 2] = -np.inf
            return out

    with pytest.raises(CriteriaError, match="draw 1, datum 2"):
        functionals(Bad(), Dataset(np.zeros(4)), chain_from([-1.0, -2.0, -3.0]))


def test_arithmetic_examples():
    assert functional_variance(fake_pf(2, 1.0, var=[0.5, 1.5])) == 2.0
    pf = fake_pf(10, 1.0, var=np.full(10, 0.2), pred=np.full(10, -1.0))
    assert bayes_training_loss(pf) == 1.0
    assert waic(pf) == pytest.approx(1.2, rel=1e-15)
    assert singular_fluctuation_hat(fake_pf(3, 2.0, var=[1.0, 1.0, 1.0])) == 3.0
    assert singular_fluctuation_hat(fake_pf(3, 2.0)) == 0.0


def test_linked_and_optimum_arithmetic():
    beta = wbic_beta(100)
    pf = fake_pf(100, beta, E_nLn=120.0, V_nLn=1.5 / beta ** 2, var=np.full(100, 0.04))
    assert imai_lambda(pf) == pytest.approx(1.5, rel=1e-14)
    lw = linked_waic(pf, 100)
    assert lw.raw == pytest.approx(115.02653920292111478, rel=1e-14)
    assert lw.per_datum == pytest.approx(lw.raw / 100, rel=1e-15)
    assert optimum_loss_estimate(pf, 100) == pytest.approx(1.1309224472101786295, rel=1e-14)


def test_equation_of_state_examples():
    assert equation_of_state_residuals(1.0, 1.0, 1.0, 1.0, 0.7) == (0.0, 0.0)
    r1, r2 = equation_of_state_residuals(1.2, 1.0, 1.3, 1.1, 1.0)
    assert r1 == pytest.approx(0.0, abs=1e-15) and r2 == pytest.approx(0.0, abs=1e-15)


def test_temperature_and_size_guards():
    pf = fake_pf(100, 0.5)
    for fn in (wbic, imai_lambda, linked_waic, optimum_loss_estimate):
        with pytest.raises(CriteriaError, match="1/log n"):
            fn(pf)
    near = fake_pf(100, wbic_beta(100) + 1e-9)
    with pytest.raises(CriteriaError):
        wbic(near)
    with pytest.raises(CriteriaError, match="n >= 3"):
        linked_waic(fake_pf(2, wbic_beta(2)))
    with pytest.raises(CriteriaError):
        linked_waic(fake_pf(100, wbic_beta(100)), 99)


def test_point_posterior_reduces_to_empirical_loss(point_setup):
    model, data, w_star, pf_w, pf_1, _ = point_setup
    ln = empirical_loss(model, data, w_star)
    n = data.n
    for pf in (pf_w, pf_1):
        assert bayes_training_loss(pf) == pytest.approx(ln, rel=1e-14)
        assert gibbs_training_loss(pf) == pytest.approx(ln, rel=1e-14)
        assert functional_variance(pf) == 0.0
        assert waic(pf) == pytest.approx(ln, rel=1e-14)
    assert wbic(pf_w) == pytest.approx(n * ln, rel=1e-14)
    assert imai_lambda(pf_w) == 0.0
    assert linked_waic(pf_w).raw == pytest.approx(n * ln, rel=1e-14)
    assert linked_waic_general_beta(pf_w, fake_pf(n, 0.5)).raw == pytest.approx(n * ln, rel=1e-14)
    assert optimum_loss_estimate(pf_w) == pytest.approx(ln, rel=1e-14)


def test_point_posterior_generalization_losses(point_setup):
    model, data, w_star, _, _, cfg = point_setup
    chain = run_chain(model, data, 1.0, cfg)
    test = sample_truth(model, 500, seed=77)
    g, _ = bayes_generalization_loss(model, chain, test)
    gp, _ = gibbs_generalization_loss(model, chain, test)
    assert gp == pytest.approx(expected_loss_mc(model, w_star, test), rel=1e-14)
    assert g == pytest.approx(gp, rel=1e-14)


@pytest.fixture(scope="module")
def conjugate_reports():
    model = ConjugateNormalMeanModel(d=1, mu0=0.3)
    data = sample_truth(model, 100, seed=5)
    bw = wbic_beta(100)
    chain_w = run_chain(model, data, bw, MALA)
    chain_1 = run_chain(model, data, 1.0, MALA.replace(seed=4))
    pf_w = functionals(model, data, chain_w)
    pf_1 = functionals(model, data, chain_1)
    return model, data, chain_w, chain_1, pf_w, pf_1


def test_functionals_match_oracle(conjugate_reports):
    model, data, _, _, pf_w, pf_1 = conjugate_reports
    for pf in (pf_w, pf_1):
        ex = conjugate_exact(model, data, pf.beta)
        report = criteria_report(pf_w, pf)
        exact = ex.criteria()
        for name in REPORT_FIELDS:
            assert abs(report.values()[name] - exact[name]) <= 3 * report.mc_se[name], name
        assert functional_variance(pf) == pytest.approx(ex.functional_variance, rel=0.15)


def test_jensen_orderings_and_nonnegativity(conjugate_reports):
    model, data, chain_w, chain_1, pf_w, pf_1 = conjugate_reports
    test = sample_truth(model, 2000, seed=8)
    for chain, pf in ((chain_w, pf_w), (chain_1, pf_1)):
        assert np.all(pf.per_datum_pred_logp >= pf.per_datum_logp_mean)
        assert bayes_training_loss(pf) <= gibbs_training_loss(pf)
        assert functional_variance(pf) >= 0 and singular_fluctuation_hat(pf) >= 0
        assert bayes_generalization_loss(model, chain, test)[0] <= gibbs_generalization_loss(model, chain, test)[0]
    assert imai_lambda(pf_w) >= 0


def test_recompositions(conjugate_reports):
    _, data, _, _, pf_w, pf_1 = conjugate_reports
    n = data.n
    assert waic(pf_1) == pytest.approx(bayes_training_loss(pf_1) + functional_variance(pf_1) / n, rel=1e-12)
    assert wbic(pf_w) == pytest.approx(n * gibbs_training_loss(pf_w), rel=1e-12)
    assert linked_waic_general_beta(pf_w, pf_1).raw == pytest.approx(linked_waic(pf_w).raw, rel=1e-12)
    report = criteria_report(pf_w, pf_1)
    assert report.waic == pytest.approx(report.waic_Tn + report.beta_main * report.waic_Vn / n, rel=1e-12)
    assert report.linked_waic_general == pytest.approx(report.linked_waic, rel=1e-12)


def test_general_beta_recomposition_with_oracle_inputs(conj1, conj1_data):
    n = conj1_data.n
    ex_w = conjugate_exact(conj1, conj1_data, wbic_beta(n))
    ex_b = conjugate_exact(conj1, conj1_data, 0.5)
    pf_w = fake_pf(n, wbic_beta(n), E_nLn=ex_w.E_nLn, V_nLn=ex_w.V_nLn, var=ex_w.per_datum_logp_var)
    pf_b = fake_pf(n, 0.5, var=ex_b.per_datum_logp_var)
    log_n = math.log(n)
    lam = ex_w.V_nLn / log_n ** 2
    hand = (ex_w.E_nLn - lam * (log_n - 2.0) + ex_w.functional_variance / (2 * log_n)
            + 0.25 * ex_b.functional_variance * (1 - 2.0))
    assert linked_waic_general_beta(pf_w, pf_b).raw == pytest.approx(hand, rel=1e-12)
    assert ex_b.criteria()["linked_waic_general"] * n == pytest.approx(hand, rel=1e-12)


def test_gibbs_generalization_matches_analytic(conjugate_reports):
    model, data, _, chain_1, _, _ = conjugate_reports
    test = sample_truth(model, 20_000, seed=9)
    gp, se = gibbs_generalization_loss(model, chain_1, test)
    ex = conjugate_exact(model, data, 1.0)
    assert abs(gp - ex.gibbs_gen_loss) <= 3 * se


def test_prior_shift_gives_identical_report(conj1, conj1_data):
    cfg = MALA.replace(n_steps=400, burn_in=100)
    reports = []
    for model in (conj1, PriorShifted(conj1, 1e3)):
        pf_w = functionals(model, conj1_data, run_chain(model, conj1_data, wbic_beta(100), cfg))
        pf_1 = functionals(model, conj1_data, run_chain(model, conj1_data, 1.0, cfg))
        reports.append(criteria_report(pf_w, pf_1).as_dict())
    assert reports[0] == reports[1]


def test_report_serialisation(conjugate_reports):
    _, _, _, _, pf_w, pf_1 = conjugate_reports
    d = criteria_report(pf_w, pf_1, {"seed": 1}).as_dict()
    for name in REPORT_FIELDS:
        assert name in d and f"{name}_mc_se" in d and d[f"{name}_mc_se"] >= 0
    assert d["chain_provenance"] == {"seed": 1}
