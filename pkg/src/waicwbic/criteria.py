"""WAIC, WBIC, functional variance, Imai estimator and the WBIC-linked WAIC.

Every criterion is a smooth function of posterior expectations, so its
Monte Carlo standard error is taken from a per-draw influence series
(delta method) divided by the square root of that series' own ESS.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .model_api import Dataset, Model, wbic_beta
from .sampler import Chain, effective_sample_size, mc_standard_error

BETA_TOL = 1e-12
_CHUNK_ELEMENTS = 2_000_000


class CriteriaError(ValueError):
    pass


@dataclass(frozen=True)
class PosteriorFunctionals:
    """Posterior moments of the per-datum log-likelihoods for one chain.

    The ``*_draws`` arrays are per-draw series shaped ``(n_chains, n_draws)``
    used only for standard errors: ``nLn_draws`` is ``n L_n(w_s)``,
    ``sqdev_draws`` is ``sum_i (log p(X_i|w_s) - mean_i)^2`` and
    ``pred_weight_draws`` is ``sum_i p(X_i|w_s) / E_w[p(X_i|w)]``.
    """

    beta: float
    n: int
    per_datum_logp_mean: np.ndarray
    per_datum_logp_var: np.ndarray
    per_datum_pred_logp: np.ndarray
    E_nLn: float
    V_nLn: float
    ess_summary: dict
    nLn_draws: np.ndarray = field(repr=False)
    sqdev_draws: np.ndarray = field(repr=False)
    pred_weight_draws: np.ndarray = field(repr=False)

    @property
    def n_draws(self) -> int:
        return int(self.nLn_draws.size)


def functionals(model: Model, data: Dataset, chain: Chain) -> PosteriorFunctionals:
    """Evaluate ``log p(X_i|w_s)`` for all draws and data, in column chunks."""
    X = data.observations
    n = X.shape[0]
    W = chain.flat_draws
    S = W.shape[0]
    if S < 1:
        raise CriteriaError("chain has no draws")
    width = max(1, _CHUNK_ELEMENTS // max(S, 1))
    mean = np.empty(n)
    var = np.empty(n)
    pred = np.empty(n)
    nl = np.zeros(S)
    sqdev = np.zeros(S)
    pweight = np.zeros(S)
    for start in range(0, n, width):
        sl = slice(start, min(start + width, n))
        L = model.log_density_matrix(X[sl], W)
        if not np.all(np.isfinite(L)):
            s_bad, i_bad = np.argwhere(~np.isfinite(L))[0]
            raise CriteriaError(f"non-finite log-density at draw {int(s_bad)}, datum {int(start + i_bad)}")
        # shift by the first draw: exact for constant columns, and better conditioned
        mu = L[0] + (L - L[0]).mean(axis=0)
        dev2 = (L - mu) ** 2
        mean[sl] = mu
        var[sl] = dev2.sum(axis=0) / (S - 1) if S > 1 else 0.0
        mx = L.max(axis=0)
        e = np.exp(L - mx)
        ebar = e.mean(axis=0)
        # log-mean-exp is >= the mean exactly; clip rounding below it
        pred[sl] = np.maximum(mx + np.log(ebar), mu)
        pweight += (e / ebar).sum(axis=1)
        sqdev += dev2.sum(axis=1)
        nl -= L.sum(axis=1)
    shape = (chain.n_chains, chain.n_draws)
    nl = nl.reshape(shape)
    E = float(nl.flat[0] + (nl - nl.flat[0]).mean())
    V = float(np.sum((nl - E) ** 2) / (S - 1)) if S > 1 else 0.0
    return PosteriorFunctionals(
        beta=chain.beta,
        n=n,
        per_datum_logp_mean=mean,
        per_datum_logp_var=var,
        per_datum_pred_logp=pred,
        E_nLn=E,
        V_nLn=V,
        ess_summary={
            "min_coordinate_ess": float(np.min(chain.ess)),
            "nLn_ess": effective_sample_size(nl),
            "n_draws": S,
            "acceptance_rate": chain.acceptance_rate,
        },
        nLn_draws=nl,
        sqdev_draws=sqdev.reshape(shape),
        pred_weight_draws=pweight.reshape(shape),
    )


def _assert_wbic_temperature(pf: PosteriorFunctionals):
    target = wbic_beta(pf.n)
    if abs(pf.beta - target) > BETA_TOL:
        raise CriteriaError(f"chain temperature {pf.beta!r} is not 1/log n = {target!r}")


def bayes_training_loss(pf: PosteriorFunctionals) -> float:
    return float(-np.mean(pf.per_datum_pred_logp))


def gibbs_training_loss(pf: PosteriorFunctionals) -> float:
    return float(-np.mean(pf.per_datum_logp_mean))


def functional_variance(pf: PosteriorFunctionals) -> float:
    return float(np.sum(pf.per_datum_logp_var))


def waic(pf: PosteriorFunctionals) -> float:
    return bayes_training_loss(pf) + pf.beta * functional_variance(pf) / pf.n


def wbic(pf: PosteriorFunctionals) -> float:
    _assert_wbic_temperature(pf)
    return pf.E_nLn


def imai_lambda(pf: PosteriorFunctionals) -> float:
    _assert_wbic_temperature(pf)
    return pf.beta ** 2 * pf.V_nLn


def singular_fluctuation_hat(pf: PosteriorFunctionals) -> float:
    return 0.5 * pf.beta * functional_variance(pf)


class LinkedWAIC(NamedTuple):
    raw: float
    per_datum: float


def _check_n(pf, n):
    n = pf.n if n is None else int(n)
    if n != pf.n:
        raise CriteriaError(f"n={n} does not match the functionals' n={pf.n}")
    if n < 3:
        raise CriteriaError("linked WAIC needs n >= 3 so that log n > 1")
    return n


def linked_waic(pf_wbic: PosteriorFunctionals, n: Optional[int] = None) -> LinkedWAIC:
    """WAIC at beta = 1 estimated from the WBIC-temperature posterior alone.

    ``raw`` estimates ``n * E[WAIC]``; ``per_datum`` is ``raw / n``.
    """
    _assert_wbic_temperature(pf_wbic)
    n = _check_n(pf_wbic, n)
    log_n = math.log(n)
    raw = wbic(pf_wbic) - imai_lambda(pf_wbic) * (log_n - 1.0) + functional_variance(pf_wbic) / (2.0 * log_n)
    return LinkedWAIC(raw, raw / n)


def linked_waic_general_beta(pf_wbic: PosteriorFunctionals, pf_beta: PosteriorFunctionals,
                             n: Optional[int] = None) -> LinkedWAIC:
    """Linked estimate of ``n E[WAIC(beta)]`` using chains at ``1/log n`` and ``beta``."""
    _assert_wbic_temperature(pf_wbic)
    n = _check_n(pf_wbic, n)
    if pf_beta.n != n:
        raise CriteriaError("the two functionals were computed on datasets of different size")
    beta = pf_beta.beta
    log_n = math.log(n)
    raw = (wbic(pf_wbic) - imai_lambda(pf_wbic) * (log_n - 1.0 / beta)
           + functional_variance(pf_wbic) / (2.0 * log_n)
           + 0.5 * beta * functional_variance(pf_beta) * (1.0 - 1.0 / beta))
    return LinkedWAIC(raw, raw / n)


def optimum_loss_estimate(pf_wbic: PosteriorFunctionals, n: Optional[int] = None) -> float:
    """Estimate of ``L_n(w0)`` from WBIC and the Imai estimator."""
    _assert_wbic_temperature(pf_wbic)
    n = pf_wbic.n if n is None else int(n)
    return wbic(pf_wbic) / n - imai_lambda(pf_wbic) * math.log(n) / n


def equation_of_state_residuals(G: float, T: float, Gp: float, Tp: float, beta: float) -> tuple[float, float]:
    gap = 2.0 * beta * (Tp - T)
    return (G - T) - gap, (Gp - Tp) - gap


def _test_matrix_iter(model, chain, test_draws):
    Xt = test_draws.observations
    W = chain.flat_draws
    width = max(1, _CHUNK_ELEMENTS // W.shape[0])
    for start in range(0, Xt.shape[0], width):
        yield model.log_density_matrix(Xt[start:start + width], W)


def gibbs_generalization_loss(model: Model, chain: Chain, test_draws: Dataset) -> tuple[float, float]:
    """``G'_n``: posterior mean of the test-set loss, with a joint standard error."""
    S = len(chain)
    per_draw = np.zeros(S)
    per_test = []
    for L in _test_matrix_iter(model, chain, test_draws):
        per_draw -= L.sum(axis=1)
        per_test.append(-L.mean(axis=0))
    T = test_draws.n
    per_draw = per_draw.reshape(chain.n_chains, chain.n_draws) / T
    per_test = np.concatenate(per_test)
    se_chain = mc_standard_error(per_draw)
    se_test = float(np.std(per_test, ddof=1) / math.sqrt(T)) if T > 1 else math.inf
    return float(per_draw.mean()), math.hypot(se_chain, se_test)


def bayes_generalization_loss(model: Model, chain: Chain, test_draws: Dataset) -> tuple[float, float]:
    """``G_n``: test-set loss of the posterior predictive, with a joint standard error."""
    S = len(chain)
    weights = np.zeros(S)
    losses = []
    for L in _test_matrix_iter(model, chain, test_draws):
        mx = L.max(axis=0)
        e = np.exp(L - mx)
        ebar = e.mean(axis=0)
        losses.append(-np.maximum(mx + np.log(ebar), L.mean(axis=0)))
        weights += (e / ebar).sum(axis=1)
    T = test_draws.n
    losses = np.concatenate(losses)
    se_chain = mc_standard_error((-weights / T).reshape(chain.n_chains, chain.n_draws))
    se_test = float(np.std(losses, ddof=1) / math.sqrt(T)) if T > 1 else math.inf
    return float(losses.mean()), math.hypot(se_chain, se_test)


REPORT_FIELDS = (
    "waic", "waic_Tn", "waic_Vn", "wbic", "lambda_hat", "nu_hat_at_wbic_temp", "nu_hat_at_beta",
    "linked_waic", "linked_waic_raw", "linked_waic_general", "gibbs_train", "optimum_loss_est",
)


@dataclass(frozen=True)
class CriteriaReport:
    """All data-computable criteria for one dataset.

    ``linked_waic`` is on the per-datum scale (comparable to ``waic``);
    ``linked_waic_raw`` is the same quantity times ``n``.
    ``linked_waic_general`` is the per-datum estimate of WAIC at
    ``beta_main``; it equals ``linked_waic`` when ``beta_main == 1``.
    """

    n: int
    beta_main: float
    waic: float
    waic_Tn: float
    waic_Vn: float
    wbic: float
    lambda_hat: float
    nu_hat_at_wbic_temp: float
    nu_hat_at_beta: float
    linked_waic: float
    linked_waic_raw: float
    linked_waic_general: float
    gibbs_train: float
    optimum_loss_est: float
    mc_se: dict
    chain_provenance: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {"n": self.n, "beta_main": self.beta_main}
        for name in REPORT_FIELDS:
            out[name] = getattr(self, name)
            out[f"{name}_mc_se"] = self.mc_se[name]
        out["chain_provenance"] = dict(self.chain_provenance)
        return out

    def values(self) -> dict:
        return {name: getattr(self, name) for name in REPORT_FIELDS}


def _se(series):
    return mc_standard_error(series)


def criteria_report(pf_wbic: PosteriorFunctionals, pf_beta: Optional[PosteriorFunctionals] = None,
                    provenance: Optional[dict] = None) -> CriteriaReport:
    """Assemble a :class:`CriteriaReport`; ``pf_beta`` defaults to the WBIC chain."""
    _assert_wbic_temperature(pf_wbic)
    pf_b = pf_wbic if pf_beta is None else pf_beta
    n = pf_wbic.n
    log_n = math.log(n)
    bw = pf_wbic.beta
    beta = pf_b.beta

    lam = imai_lambda(pf_wbic)
    vn_w = functional_variance(pf_wbic)
    linked = linked_waic(pf_wbic)
    general = linked_waic_general_beta(pf_wbic, pf_b)

    # influence series (same chain shape within each temperature)
    nl = pf_wbic.nLn_draws
    psi_lam = bw * bw * (nl - nl.mean()) ** 2
    psi_vw = pf_wbic.sqdev_draws
    psi_T = -pf_b.pred_weight_draws / n
    psi_Vb = pf_b.sqdev_draws
    psi_gt = pf_b.nLn_draws / n
    psi_linked = nl - (log_n - 1.0) * psi_lam + psi_vw / (2.0 * log_n)
    psi_general_w = nl - (log_n - 1.0 / beta) * psi_lam + psi_vw / (2.0 * log_n)
    psi_general_b = 0.5 * beta * (1.0 - 1.0 / beta) * psi_Vb
    if pf_beta is None:
        se_general = _se(psi_general_w + psi_general_b) / n
    else:
        se_general = math.hypot(_se(psi_general_w), _se(psi_general_b)) / n
    se_linked_raw = _se(psi_linked)

    mc_se = {
        "waic": _se(psi_T + beta * psi_Vb / n),
        "waic_Tn": _se(psi_T),
        "waic_Vn": _se(psi_Vb),
        "wbic": _se(nl),
        "lambda_hat": _se(psi_lam),
        "nu_hat_at_wbic_temp": 0.5 * bw * _se(psi_vw),
        "nu_hat_at_beta": 0.5 * beta * _se(psi_Vb),
        "linked_waic": se_linked_raw / n,
        "linked_waic_raw": se_linked_raw,
        "linked_waic_general": se_general,
        "gibbs_train": _se(psi_gt),
        "optimum_loss_est": _se(nl / n - psi_lam * log_n / n),
    }
    return CriteriaReport(
        n=n,
        beta_main=beta,
        waic=waic(pf_b),
        waic_Tn=bayes_training_loss(pf_b),
        waic_Vn=functional_variance(pf_b),
        wbic=wbic(pf_wbic),
        lambda_hat=lam,
        nu_hat_at_wbic_temp=0.5 * bw * vn_w,
        nu_hat_at_beta=singular_fluctuation_hat(pf_b),
        linked_waic=linked.per_datum,
        linked_waic_raw=linked.raw,
        linked_waic_general=general.per_datum,
        gibbs_train=gibbs_training_loss(pf_b),
        optimum_loss_est=optimum_loss_estimate(pf_wbic),
        mc_se=mc_se,
        chain_provenance=dict(provenance or {}),
    )
