r"""Exact reference values: closed forms for the conjugate model, quadrature for d <= 2.

Conjugate derivations
---------------------
Model ``x ~ N(w, s2 I_d)`` (``s2 = sigma^2``), prior ``N(m0, tau^2 I_d)``,
data ``X_1..X_n`` with mean ``xbar``. The tempered posterior at ``beta`` is
Gaussian, isotropic:

    precision  P = n beta / s2 + 1 / tau^2,   v = 1 / P
    mean       m = v (beta n xbar / s2 + m0 / tau^2)

Write ``w = m + sqrt(v) z`` with ``z ~ N(0, I_d)``. For any fixed vector
``r`` the quadratic ``||r - sqrt(v) z||^2`` has mean ``||r||^2 + d v`` and
variance ``4 v ||r||^2 + 2 d v^2`` (the linear and quadratic parts of ``z``
are uncorrelated). Hence, with ``r_i = X_i - m``:

    E[log p(X_i|w)]  = -d/2 log(2 pi s2) - (||r_i||^2 + d v) / (2 s2)
    V[log p(X_i|w)]  = (4 v ||r_i||^2 + 2 d v^2) / (4 s2^2)

``n L_n(w) = n d/2 log(2 pi s2) + (S + n ||xbar - w||^2) / (2 s2)`` where
``S = sum_i ||X_i - xbar||^2``; with ``u = xbar - m``:

    E[n L_n] = n d/2 log(2 pi s2) + (S + n ||u||^2 + n d v) / (2 s2)
    V[n L_n] = n^2 (4 v ||u||^2 + 2 d v^2) / (4 s2^2)

The predictive density is ``N(m, (s2 + v) I_d)``, giving ``T_n`` directly,
and against the truth ``N(mu0, s2 I_d)``:

    G_n  = d/2 log(2 pi (s2 + v)) + (d s2 + ||mu0 - m||^2) / (2 (s2 + v))
    G'_n = d/2 log(2 pi s2) + (d s2 + ||mu0 - m||^2 + d v) / (2 s2)

Every formula is cross-checked against :func:`quadrature_functionals` in the
test suite before any test relies on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from .model_api import Dataset, Model, check_beta, wbic_beta
from .models import LOG_2PI, ConjugateNormalMeanModel

TRUNCATION_TOL = 1e-12
MAX_NODES = 401


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConjugateOracleResult:
    beta: float
    n: int
    posterior_mean: np.ndarray
    posterior_variance: float
    E_nLn: float
    V_nLn: float
    per_datum_logp_mean: np.ndarray
    per_datum_logp_var: np.ndarray
    predictive_logp: np.ndarray
    bayes_gen_loss: float
    gibbs_gen_loss: float
    gibbs_train_loss: float
    bayes_train_loss: float
    functional_variance: float
    waic: float
    wbic_component_terms: dict

    def criteria(self) -> dict:
        """Exact values keyed like :class:`waicwbic.criteria.CriteriaReport` fields."""
        wb = self.wbic_component_terms
        n, beta = self.n, self.beta
        log_n = math.log(n)
        bw = 1.0 / log_n
        nu_wbic = 0.5 * bw * wb["Vn_at_wbic_temp"]
        nu_beta = 0.5 * beta * self.functional_variance
        linked_raw = wb["F_hat"] - wb["lambda_hat"] * (log_n - 1.0) + wb["Vn_at_wbic_temp"] / (2.0 * log_n)
        general_raw = (wb["F_hat"] - wb["lambda_hat"] * (log_n - 1.0 / beta)
                       + wb["Vn_at_wbic_temp"] / (2.0 * log_n) + nu_beta * (1.0 - 1.0 / beta))
        return {
            "waic": self.waic,
            "waic_Tn": self.bayes_train_loss,
            "waic_Vn": self.functional_variance,
            "wbic": wb["F_hat"],
            "lambda_hat": wb["lambda_hat"],
            "nu_hat_at_wbic_temp": nu_wbic,
            "nu_hat_at_beta": nu_beta,
            "linked_waic": linked_raw / n,
            "linked_waic_raw": linked_raw,
            "linked_waic_general": general_raw / n,
            "gibbs_train": self.gibbs_train_loss,
            "optimum_loss_est": wb["F_hat"] / n - wb["lambda_hat"] * log_n / n,
        }


def _posterior_params(model: ConjugateNormalMeanModel, X: np.ndarray, beta: float):
    n = X.shape[0]
    s2, t2 = model.sigma ** 2, model.tau ** 2
    precision = n * beta / s2 + 1.0 / t2
    v = 1.0 / precision
    mean = v * (beta * X.sum(axis=0) / s2 + model.prior_mean / t2)
    return mean, v


def _truncation_mass(model: ConjugateNormalMeanModel, mean, v) -> float:
    sd = math.sqrt(v)
    return float(np.sum(norm.cdf((-model.bound - mean) / sd) + norm.sf((model.bound - mean) / sd)))


def _conjugate_pieces(model, X, beta):
    d = model.d
    s2 = model.sigma ** 2
    n = X.shape[0]
    mean, v = _posterior_params(model, X, beta)
    mass = max(_truncation_mass(model, mean, v), model.prior_truncation_mass())
    if mass >= TRUNCATION_TOL:
        raise OracleError(f"posterior/prior mass outside the box is {mass:.3e} >= {TRUNCATION_TOL}")
    r2 = np.sum((X - mean) ** 2, axis=1)
    const = 0.5 * d * (LOG_2PI + math.log(s2))
    logp_mean = -const - (r2 + d * v) / (2 * s2)
    logp_var = (4 * v * r2 + 2 * d * v * v) / (4 * s2 * s2)
    xbar = X.mean(axis=0)
    S = float(np.sum((X - xbar) ** 2))
    u2 = float(np.sum((xbar - mean) ** 2))
    E_nLn = n * const + (S + n * u2 + n * d * v) / (2 * s2)
    V_nLn = n * n * (4 * v * u2 + 2 * d * v * v) / (4 * s2 * s2)
    return mean, v, logp_mean, logp_var, E_nLn, V_nLn, r2


def conjugate_bayes_gen_loss(model: ConjugateNormalMeanModel, data: Dataset, beta: float) -> float:
    """Exact ``G_n(beta)``: cross-entropy of the Gaussian predictive against the truth."""
    beta = check_beta(beta)
    X = data.observations
    mean, v = _posterior_params(model, X, beta)
    mass = max(_truncation_mass(model, mean, v), model.prior_truncation_mass())
    if mass >= TRUNCATION_TOL:
        raise OracleError(f"posterior/prior mass outside the box is {mass:.3e} >= {TRUNCATION_TOL}")
    s2, d = model.sigma ** 2, model.d
    pv = s2 + v
    return float(0.5 * d * (LOG_2PI + math.log(pv)) + (d * s2 + np.sum((model.mu0 - mean) ** 2)) / (2 * pv))


def conjugate_exact(model: ConjugateNormalMeanModel, data: Dataset, beta: float) -> ConjugateOracleResult:
    """All posterior functionals and losses of the conjugate model in closed form."""
    beta = check_beta(beta)
    X = data.observations
    if X.shape[1] != model.d:
        raise OracleError(f"data dimension {X.shape[1]} != model dimension {model.d}")
    n, d = X.shape
    s2 = model.sigma ** 2
    mean, v, logp_mean, logp_var, E_nLn, V_nLn, r2 = _conjugate_pieces(model, X, beta)
    pv = s2 + v
    pred = -0.5 * d * (LOG_2PI + math.log(pv)) - r2 / (2 * pv)
    Tn = float(-pred.mean())
    Vn = float(logp_var.sum())
    mu_gap = float(np.sum((model.mu0 - mean) ** 2))
    G = 0.5 * d * (LOG_2PI + math.log(pv)) + (d * s2 + mu_gap) / (2 * pv)
    Gp = 0.5 * d * (LOG_2PI + math.log(s2)) + (d * s2 + mu_gap + d * v) / (2 * s2)

    bw = wbic_beta(n)
    _, _, _, w_var, w_E, w_V, _ = _conjugate_pieces(model, X, bw)
    return ConjugateOracleResult(
        beta=beta,
        n=n,
        posterior_mean=mean,
        posterior_variance=float(v),
        E_nLn=float(E_nLn),
        V_nLn=float(V_nLn),
        per_datum_logp_mean=logp_mean,
        per_datum_logp_var=logp_var,
        predictive_logp=pred,
        bayes_gen_loss=float(G),
        gibbs_gen_loss=float(Gp),
        gibbs_train_loss=float(E_nLn / n),
        bayes_train_loss=Tn,
        functional_variance=Vn,
        waic=Tn + beta * Vn / n,
        wbic_component_terms={
            "F_hat": float(w_E),
            "lambda_hat": float(bw * bw * w_V),
            "Vn_at_wbic_temp": float(w_var.sum()),
        },
    )


@dataclass(frozen=True)
class QuadratureOracle:
    """Gauss-Legendre tensor grid with normalised tempered-posterior log weights."""

    beta: float
    nodes: np.ndarray
    log_weights: np.ndarray
    window: tuple

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)


def _log_posterior_on(model, X, W, beta, chunk=1024):
    out = np.empty(W.shape[0])
    for start in range(0, W.shape[0], chunk):
        sl = slice(start, start + chunk)
        out[sl] = beta * model.log_density_matrix(X, W[sl]).sum(axis=1) + model.log_prior(W[sl])
    return out


def _auto_window(model, X, beta, cut=60.0):
    """Locate the sub-box holding all but ``exp(-cut)`` of the posterior density."""
    d = model.parameter_dim
    per_axis = {1: 4001, 2: 201}[d]
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(model.lower, model.upper)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    lp = _log_posterior_on(model, X, grid, beta)
    keep = lp >= lp.max() - cut
    lo, hi = [], []
    for j in range(d):
        step = axes[j][1] - axes[j][0]
        vals = grid[keep, j]
        lo.append(max(model.lower[j], vals.min() - 2 * step))
        hi.append(min(model.upper[j], vals.max() + 2 * step))
    return np.array(lo), np.array(hi)


def build_quadrature(model: Model, data: Dataset, beta: float, n_nodes: int = 201,
                     window="auto") -> QuadratureOracle:
    """Tensor Gauss-Legendre grid over ``window`` (``"auto"``, ``"box"`` or ``(lo, hi)``)."""
    beta = check_beta(beta)
    d = model.parameter_dim
    if d > 2:
        raise OracleError("quadrature is limited to d <= 2")
    if not 2 <= n_nodes <= MAX_NODES:
        raise OracleError(f"per-axis node count must be in [2, {MAX_NODES}]")
    X = data.observations
    if window == "auto":
        lo, hi = _auto_window(model, X, beta)
    elif window == "box":
        lo, hi = model.lower, model.upper
    else:
        lo, hi = (np.asarray(v, dtype=float) for v in window)
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    axes, wts = [], []
    for j in range(d):
        half = 0.5 * (hi[j] - lo[j])
        axes.append(lo[j] + half * (x + 1.0))
        wts.append(np.log(w * half))
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    log_w = sum(np.meshgrid(*wts, indexing="ij")).reshape(-1)
    lp = _log_posterior_on(model, X, nodes, beta) + log_w
    log_w = lp - logsumexp(lp)
    return QuadratureOracle(beta=beta, nodes=nodes, log_weights=log_w, window=(tuple(lo), tuple(hi)))


def quadrature_expectation(q: QuadratureOracle, f_values) -> float:
    f = np.asarray(f_values, dtype=float).reshape(-1)
    if f.shape[0] != q.nodes.shape[0]:
        raise OracleError(f"got {f.shape[0]} values for {q.nodes.shape[0]} nodes")
    if not np.all(np.isfinite(f)):
        raise OracleError(f"non-finite value at node {int(np.flatnonzero(~np.isfinite(f))[0])}")
    return float(np.dot(q.weights, f))


def quadrature_functionals(model: Model, data: Dataset, q: QuadratureOracle, chunk: int = 2048) -> dict:
    """Posterior functionals of ``(model, data)`` evaluated on the quadrature grid.

    Nodes are processed in chunks; per-datum variances use a second pass
    around the already computed means.
    """
    X = data.observations
    n = X.shape[0]
    w = q.weights
    G = q.nodes.shape[0]
    mean = np.zeros(n)
    pred = np.full(n, -np.inf)
    nl = np.empty(G)
    for start in range(0, G, chunk):
        sl = slice(start, start + chunk)
        L = model.log_density_matrix(X, q.nodes[sl])
        mean += w[sl] @ L
        pred = np.logaddexp(pred, logsumexp(L + q.log_weights[sl, None], axis=0))
        nl[sl] = -L.sum(axis=1)
    var = np.zeros(n)
    for start in range(0, G, chunk):
        sl = slice(start, start + chunk)
        L = model.log_density_matrix(X, q.nodes[sl])
        var += w[sl] @ (L - mean) ** 2
    E = float(w @ nl)
    V = float(w @ (nl - E) ** 2)
    Tn = float(-pred.mean())
    Vn = float(var.sum())
    return {
        "beta": q.beta,
        "per_datum_logp_mean": mean,
        "per_datum_logp_var": var,
        "predictive_logp": pred,
        "E_nLn": E,
        "V_nLn": V,
        "bayes_train_loss": Tn,
        "functional_variance": Vn,
        "waic": Tn + q.beta * Vn / n,
        "gibbs_train_loss": E / n,
    }


def quadrature_bayes_gen_loss(model: ConjugateNormalMeanModel, q: QuadratureOracle, n_x: int = 200) -> float:
    """``G_n`` for a one-dimensional Gaussian truth by Gauss-Hermite over ``x``.

    The predictive density at each ``x`` node comes from the parameter grid.
    """
    if model.observation_dim != 1:
        raise OracleError("Gauss-Hermite integration over x is implemented for p = 1")
    t, wt = np.polynomial.hermite_e.hermegauss(n_x)
    xs = (model.mu0[0] + model.sigma * t)[:, None]
    L = model.log_density_matrix(xs, q.nodes)
    log_pred = logsumexp(L + q.log_weights[:, None], axis=0)
    return float(-(wt @ log_pred) / math.sqrt(2 * math.pi))


def refinement_delta(model: Model, data: Dataset, beta: float, n_nodes: int = 201) -> float:
    """Max relative change of the main functionals when the node count doubles (capped)."""
    coarse = quadrature_functionals(model, data, build_quadrature(model, data, beta, n_nodes))
    fine_nodes = min(2 * n_nodes - 1, MAX_NODES)
    fine = quadrature_functionals(model, data, build_quadrature(model, data, beta, fine_nodes))
    keys = ("E_nLn", "V_nLn", "bayes_train_loss", "functional_variance")
    return max(abs(coarse[k] - fine[k]) / max(abs(fine[k]), 1e-300) for k in keys)
