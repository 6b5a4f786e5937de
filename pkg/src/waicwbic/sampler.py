"""Tempered-posterior MCMC (random-walk Metropolis and MALA) plus diagnostics.

The target at inverse temperature ``beta`` is
``prod_i p(X_i|w)^beta * phi(w)`` restricted to the model's box; proposals
falling outside the box are rejected. All chains of one run advance in
lockstep so each step costs a single batched likelihood evaluation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .model_api import Dataset, Model, check_beta

ALGORITHMS = {"rwm": "rwm", "random-walk-metropolis": "rwm", "mala": "mala"}
TARGET_ACCEPT = {"rwm": 0.234, "mala": 0.574}


class SamplerError(RuntimeError):
    """Raised when a chain cannot be started or a functional is non-finite."""


@dataclass(frozen=True)
class SamplerConfig:
    algorithm: str = "rwm"
    step_size: float = 0.1
    n_steps: int = 4000
    burn_in: int = 1000
    thin: int = 1
    n_chains: int = 4
    seed: int = 0
    adapt: bool = True
    init: Optional[tuple] = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {sorted(ALGORITHMS)}")
        if not (self.step_size >= 0 and math.isfinite(self.step_size)):
            raise ValueError("step_size must be finite and >= 0")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if not 0 <= self.burn_in < self.n_steps:
            raise ValueError("need 0 <= burn_in < n_steps")
        if self.init is not None:
            object.__setattr__(self, "init", tuple(float(v) for v in np.ravel(self.init)))

    @property
    def kind(self) -> str:
        return ALGORITHMS[self.algorithm]

    def replace(self, **changes) -> "SamplerConfig":
        values = {k: getattr(self, k) for k in self.__dataclass_fields__}
        values.update(changes)
        return SamplerConfig(**values)


@dataclass(frozen=True)
class Chain:
    """Retained draws of one or more parallel chains.

    Array fields are indexed ``[chain, draw]``; ``draws`` has a trailing
    parameter axis. ``loglik_sum`` is ``sum_i log p(X_i|w)`` per draw.
    """

    beta: float
    draws: np.ndarray
    loglik_sum: np.ndarray
    log_prior: np.ndarray
    acceptance_rate: float
    seed: int
    step_sizes: np.ndarray
    algorithm: str = "rwm"
    ess: np.ndarray = field(default=None)

    def __post_init__(self):
        for name in ("draws", "loglik_sum", "log_prior", "step_sizes"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.ess is None:
            ess = np.array([effective_sample_size(self.draws[..., j]) for j in range(self.dim)])
            ess.setflags(write=False)
            object.__setattr__(self, "ess", ess)

    @property
    def log_unnorm_posterior(self) -> np.ndarray:
        return self.beta * self.loglik_sum + self.log_prior

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_draws(self) -> int:
        return self.draws.shape[1]

    @property
    def dim(self) -> int:
        return self.draws.shape[2]

    @property
    def flat_draws(self) -> np.ndarray:
        return self.draws.reshape(-1, self.dim)

    def __len__(self):
        return self.n_chains * self.n_draws


def _log_target(model, X, W, beta):
    """Return (loglik_sum, log_prior); rows outside the box get -inf."""
    K = W.shape[0]
    ll = np.full(K, -np.inf)
    lp = np.full(K, -np.inf)
    inside = model.in_bounds(W)
    if np.any(inside):
        ll[inside] = model.log_likelihood_sum(X, W[inside])
        lp[inside] = model.log_prior(W[inside])
    return ll, lp


def _grad_target(model, X, W, beta):
    return beta * model.grad_log_likelihood_sum(X, W) + model.grad_log_prior(W)


def _initial_points(model, cfg, rng):
    K, d = cfg.n_chains, model.parameter_dim
    if cfg.init is not None:
        init = np.asarray(cfg.init, dtype=float)
        if init.size == d:
            return np.tile(init, (K, 1))
        if init.size == K * d:
            return init.reshape(K, d)
        raise SamplerError(f"init must have {d} or {K * d} values, got {init.size}")
    lo, hi = model.lower, model.upper
    return lo + (hi - lo) * (0.25 + 0.5 * rng.random((K, d)))


def run_chain(model: Model, data: Dataset, beta: float, cfg: SamplerConfig) -> Chain:
    """Sample the tempered posterior at ``beta``; deterministic given ``cfg.seed``."""
    beta = check_beta(beta)
    X = data.observations
    if X.shape[1] != model.observation_dim:
        raise SamplerError(f"data dimension {X.shape[1]} != model dimension {model.observation_dim}")
    kind = cfg.kind
    if kind == "mala" and not model.has_gradient:
        raise SamplerError(f"MALA requested but {type(model).__name__} provides no gradients")

    rng = np.random.default_rng(cfg.seed)
    K, d = cfg.n_chains, model.parameter_dim
    W = _initial_points(model, cfg, rng)
    if not np.all(model.in_bounds(W)):
        raise SamplerError("initial point lies outside the parameter box")
    ll, lp = _log_target(model, X, W, beta)
    target = beta * ll + lp
    if not np.all(np.isfinite(target)):
        raise SamplerError(f"non-finite target at the initial point(s) {W[~np.isfinite(target)]}")
    grad = _grad_target(model, X, W, beta) if kind == "mala" else None

    h = np.full(K, float(cfg.step_size))
    goal = TARGET_ACCEPT[kind]
    n_keep = len(range(cfg.burn_in, cfg.n_steps, cfg.thin))
    out_w = np.empty((K, n_keep, d))
    out_ll = np.empty((K, n_keep))
    out_lp = np.empty((K, n_keep))
    accepted = np.zeros(K)
    kept = 0

    for t in range(cfg.n_steps):
        z = rng.standard_normal((K, d))
        log_u = np.log(rng.random(K))
        if kind == "mala":
            prop = W + 0.5 * (h * h)[:, None] * grad + h[:, None] * z
        else:
            prop = W + h[:, None] * z
        p_ll, p_lp = _log_target(model, X, prop, beta)
        p_target = beta * p_ll + p_lp
        finite = np.isfinite(p_target)
        with np.errstate(invalid="ignore"):
            log_alpha = np.where(finite, beta * (p_ll - ll) + (p_lp - lp), -np.inf)
        p_grad = None
        if kind == "mala":
            p_grad = np.zeros_like(W)
            if np.any(finite):
                p_grad[finite] = _grad_target(model, X, prop[finite], beta)
            moving = finite & (h > 0)
            if np.any(moving):
                hm = h[moving][:, None]
                fwd = prop[moving] - W[moving] - 0.5 * hm * hm * grad[moving]
                bwd = W[moving] - prop[moving] - 0.5 * hm * hm * p_grad[moving]
                corr = (np.sum(fwd * fwd, axis=1) - np.sum(bwd * bwd, axis=1)) / (2 * hm[:, 0] ** 2)
                log_alpha[moving] += corr
        accept = log_u < log_alpha
        if np.any(accept):
            W = np.where(accept[:, None], prop, W)
            ll = np.where(accept, p_ll, ll)
            lp = np.where(accept, p_lp, lp)
            target = np.where(accept, p_target, target)
            if kind == "mala":
                grad = np.where(accept[:, None], p_grad, grad)
        if t < cfg.burn_in:
            if cfg.adapt:
                # driven by accept decisions only, so a constant prior offset cannot perturb h
                h = h * np.exp((accept - goal) / (t + 1) ** 0.6)
        else:
            accepted += accept
            if (t - cfg.burn_in) % cfg.thin == 0:
                out_w[:, kept] = W
                out_ll[:, kept] = ll
                out_lp[:, kept] = lp
                kept += 1

    n_post = cfg.n_steps - cfg.burn_in
    return Chain(
        beta=beta,
        draws=out_w,
        loglik_sum=out_ll,
        log_prior=out_lp,
        acceptance_rate=float(accepted.sum() / (K * n_post)),
        seed=int(cfg.seed),
        step_sizes=h,
        algorithm=kind,
    )


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Autocovariance of each row of ``x`` (biased estimator) via FFT."""
    m, n = x.shape
    centered = x - x.mean(axis=1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(centered, n=size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n]
    return acov / n


def effective_sample_size(x: np.ndarray) -> float:
    """Multi-chain ESS with Geyer's initial positive (monotone) sequence.

    ``x`` has shape ``(n_chains, n_draws)`` or ``(n_draws,)``.
    A constant input returns the total number of draws.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m, n = x.shape
    total = m * n
    if n < 4:
        return float(total)
    acov = _autocovariance(x)
    chain_var = acov[:, 0] * n / (n - 1)
    within = chain_var.mean()
    var_plus = within * (n - 1) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    if not var_plus > 0:
        return float(total)
    rho = 1.0 - (within - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    tau = -1.0
    prev = np.inf
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        pair = min(pair, prev)
        tau += 2.0 * pair
        prev = pair
    tau = max(tau, 1.0 / math.log10(total) if total > 10 else 1e-3)
    return float(total / tau)


def _functional_values(chain: Chain, f) -> np.ndarray:
    if callable(f):
        vals = np.asarray(f(chain.flat_draws), dtype=float)
        if vals.shape == ():
            vals = np.full(len(chain), float(vals))
        vals = vals.reshape(chain.n_chains, chain.n_draws)
    else:
        vals = np.asarray(f, dtype=float).reshape(chain.n_chains, chain.n_draws)
    bad = np.flatnonzero(~np.isfinite(vals.reshape(-1)))
    if bad.size:
        raise SamplerError(f"non-finite functional value at draw index {int(bad[0])}")
    return vals


def mc_standard_error(values: np.ndarray) -> float:
    """``sd(values) / sqrt(ESS(values))`` for a ``(n_chains, n_draws)`` array."""
    values = np.atleast_2d(values)
    if values.size < 2:
        return math.inf
    sd = float(np.std(values, ddof=1))
    if sd == 0.0:
        return 0.0
    return sd / math.sqrt(effective_sample_size(values))


def posterior_expectation(chain: Chain, f: Union[Callable, np.ndarray]) -> tuple[float, float]:
    """Posterior mean of ``f`` and its Monte Carlo standard error.

    ``f`` is either a callable mapping the ``(S, d)`` draw matrix to ``S``
    values, or the per-draw values themselves.
    """
    vals = _functional_values(chain, f)
    return float(vals.mean()), mc_standard_error(vals)


def posterior_variance(chain: Chain, f: Union[Callable, np.ndarray]) -> float:
    vals = _functional_values(chain, f)
    if vals.size < 2:
        raise SamplerError("posterior variance needs at least 2 draws")
    return float(np.var(vals, ddof=1))


def rhat(chains: Union[Chain, Sequence[Chain]]) -> np.ndarray:
    """Split-R-hat per coordinate; 1.0 where all draws are constant."""
    if isinstance(chains, Chain):
        chains = [chains]
    lengths = {c.n_draws for c in chains}
    if len(lengths) != 1:
        raise SamplerError(f"chains have unequal lengths {sorted(lengths)}")
    draws = np.concatenate([c.draws for c in chains], axis=0)
    m, n, d = draws.shape
    if m < 2 and n < 4:
        raise SamplerError("R-hat needs at least 2 chains")
    half = n // 2
    split = np.concatenate([draws[:, :half], draws[:, n - half:]], axis=0)
    out = np.empty(d)
    for j in range(d):
        x = split[..., j]
        within = x.var(axis=1, ddof=1).mean()
        between = half * x.mean(axis=1).var(ddof=1)
        var_plus = (half - 1) / half * within + between / half
        if within <= 0:
            out[j] = 1.0 if var_plus <= 0 else math.inf
        else:
            out[j] = math.sqrt(var_plus / within)
    return out


def dump_chain_csv(chain: Chain, path) -> None:
    """Write one row per draw: chain index, draw index, coordinates, log target."""
    lup = chain.log_unnorm_posterior
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain", "draw"] + [f"w{j + 1}" for j in range(chain.dim)] + ["log_unnorm_posterior"])
        for c in range(chain.n_chains):
            for s in range(chain.n_draws):
                writer.writerow([c, s] + [repr(float(v)) for v in chain.draws[c, s]] + [repr(float(lup[c, s]))])
