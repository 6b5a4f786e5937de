"""Concrete models: a regular conjugate Gaussian and two singular families.

Which models satisfy the variance-domination condition of the fundamental
conditions is documented per class; it is never checked at runtime.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from .model_api import Model, ModelError, TruthMeta

LOG_2PI = math.log(2.0 * math.pi)


class ConjugateNormalMeanModel(Model):
    """``x ~ N(w, sigma^2 I_d)`` with prior ``N(prior_mean, tau^2 I_d)`` truncated to ``[-B, B]^d``.

    The truth is ``N(mu0, sigma^2 I_d)``, so the model is regular and
    realizable with ``lambda = nu = d/2``. Being realizable, it satisfies
    the variance-domination condition trivially.
    """

    def __init__(self, d: int = 1, sigma: float = 1.0, tau: float = 1.0, mu0=0.0,
                 bound: float = 20.0, prior_mean=0.0):
        if d < 1:
            raise ModelError("d must be >= 1")
        if not (sigma > 0 and tau > 0 and bound > 0):
            raise ModelError("sigma, tau and bound must be positive")
        self.d = int(d)
        self.sigma = float(sigma)
        self.tau = float(tau)
        self.bound = float(bound)
        self.mu0 = np.broadcast_to(np.asarray(mu0, dtype=float), (self.d,)).copy()
        self.prior_mean = np.broadcast_to(np.asarray(prior_mean, dtype=float), (self.d,)).copy()
        if np.any(np.abs(self.mu0) > self.bound):
            raise ModelError("mu0 must lie inside the parameter box")
        self.parameter_dim = self.d
        self.observation_dim = self.d
        self._stats = None
        self.lower = np.full(self.d, -self.bound)
        self.upper = np.full(self.d, self.bound)
        self.truth = TruthMeta(
            w0=self.mu0.copy(),
            optimal_loss=0.5 * self.d * (LOG_2PI + 2 * math.log(self.sigma)) + 0.5 * self.d,
            known_lambda=0.5 * self.d,
            known_lambda_source="regular realizable model: lambda = d/2",
        )

    def log_density_matrix(self, X, W):
        X = np.asarray(X, dtype=float)
        W = np.atleast_2d(np.asarray(W, dtype=float))
        self._check_dims(X, W)
        s2 = self.sigma ** 2
        if self.d == 1:
            sq = (X[None, :, 0] - W[:, 0, None]) ** 2
        else:
            sq = np.maximum(np.sum(X * X, axis=1)[None, :] - 2.0 * (W @ X.T)
                            + np.sum(W * W, axis=1)[:, None], 0.0)
        return -0.5 * self.d * (LOG_2PI + math.log(s2)) - 0.5 * sq / s2

    def _sufficient_stats(self, X):
        # read-only dataset arrays are cached by identity; the sampler reuses one X
        cached = self._stats
        if cached is not None and cached[0] is X:
            return cached[1], cached[2]
        X = np.asarray(X, dtype=float)
        xbar = X.mean(axis=0)
        spread = float(np.sum((X - xbar) ** 2))
        if not X.flags.writeable:
            self._stats = (X, xbar, spread)
        return xbar, spread

    def log_likelihood_sum(self, X, W):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        n = len(X)
        xbar, spread = self._sufficient_stats(X)
        s2 = self.sigma ** 2
        sq = spread + n * np.sum((W - xbar) ** 2, axis=1)
        return -0.5 * n * self.d * (LOG_2PI + math.log(s2)) - 0.5 * sq / s2

    def grad_log_likelihood_sum(self, X, W):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        xbar, _ = self._sufficient_stats(X)
        return len(X) * (xbar - W) / self.sigma ** 2

    def log_prior(self, W):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        return -0.5 * np.sum((W - self.prior_mean) ** 2, axis=1) / self.tau ** 2

    def grad_log_density_matrix(self, X, W):
        X = np.asarray(X, dtype=float)
        W = np.atleast_2d(np.asarray(W, dtype=float))
        return (X[None, :, :] - W[:, None, :]) / self.sigma ** 2

    def grad_log_prior(self, W):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        return -(W - self.prior_mean) / self.tau ** 2

    @property
    def has_gradient(self):
        return True

    @property
    def has_truth_sampler(self):
        return True

    def _sample(self, n, rng):
        return self.mu0 + self.sigma * rng.standard_normal((n, self.d))

    def prior_truncation_mass(self) -> float:
        """Prior mass of ``N(prior_mean, tau^2 I)`` outside the box (union bound)."""
        lo = norm.cdf((-self.bound - self.prior_mean) / self.tau)
        hi = norm.sf((self.bound - self.prior_mean) / self.tau)
        return float(np.sum(lo + hi))


class GaussianMixtureModel(Model):
    """``p(x|a,b) = (1-a) N(x|0,1) + a N(x|b,1)`` with a standard normal truth.

    Parameters are ``(a, b)`` with ``a`` in ``[0, 1]`` and ``b`` in
    ``[-B, B]``. Fixing ``b`` leaves a one-dimensional model in ``a``.
    The truth is realized on the set ``{a = 0} | {b = 0}``, which makes the
    two-parameter model singular. The prior is uniform on the box.
    """

    def __init__(self, bound: float = 5.0, fixed_b: Optional[float] = None,
                 known_lambda: Optional[float] = None, known_lambda_source: str = ""):
        if bound <= 0:
            raise ModelError("bound must be positive")
        self.bound = float(bound)
        self.fixed_b = None if fixed_b is None else float(fixed_b)
        if self.fixed_b is not None and abs(self.fixed_b) > self.bound:
            raise ModelError("fixed_b must lie in [-B, B]")
        if self.fixed_b is None:
            self.parameter_dim = 2
            self.lower = np.array([0.0, -self.bound])
            self.upper = np.array([1.0, self.bound])
            w0 = np.array([0.0, 0.0])
        else:
            self.parameter_dim = 1
            self.lower = np.array([0.0])
            self.upper = np.array([1.0])
            w0 = np.array([0.0])
        self.observation_dim = 1
        self.truth = TruthMeta(
            w0=w0,
            optimal_loss=0.5 * LOG_2PI + 0.5,
            known_lambda=known_lambda,
            known_lambda_source=known_lambda_source,
        )

    def _split(self, W):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        a = W[:, 0]
        b = W[:, 1] if self.fixed_b is None else np.full(W.shape[0], self.fixed_b)
        if np.any((a < 0) | (a > 1)):
            raise ModelError("mixing weight a must lie in [0, 1]")
        return W, a, b

    def _log_terms(self, X, a, b):
        x = np.asarray(X, dtype=float)[:, 0]
        # log[(1-a) + a exp(bx - b^2/2)] added to the standard normal log-density
        u = b[:, None] * x[None, :] - 0.5 * (b * b)[:, None]
        with np.errstate(divide="ignore"):
            log_a = np.log(a)[:, None]
            log_1ma = np.log1p(-a)[:, None]
        mix = np.logaddexp(log_1ma, log_a + u)
        base = -0.5 * LOG_2PI - 0.5 * x * x
        return base[None, :], mix, u, log_a

    def log_density_matrix(self, X, W):
        X = np.asarray(X, dtype=float)
        W, a, b = self._split(W)
        self._check_dims(X, W)
        base, mix, _, _ = self._log_terms(X, a, b)
        return base + mix

    def log_prior(self, W):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        return np.zeros(W.shape[0])

    def grad_log_density_matrix(self, X, W):
        X = np.asarray(X, dtype=float)
        W, a, b = self._split(W)
        _, mix, u, log_a = self._log_terms(X, a, b)
        x = X[:, 0][None, :]
        grad = np.empty((W.shape[0], X.shape[0], self.parameter_dim))
        grad[..., 0] = np.exp(u - mix) - np.exp(-mix)
        if self.fixed_b is None:
            grad[..., 1] = np.exp(log_a + u - mix) * (x - b[:, None])
        return grad

    @property
    def has_gradient(self):
        return True

    @property
    def has_truth_sampler(self):
        return True

    def _sample(self, n, rng):
        return rng.standard_normal((n, 1))


class ReducedRankRegressionModel(Model):
    """``y = B A x + e`` with ``A`` (H x M), ``B`` (N x H), unit-variance noise.

    Observations pack ``(x, y)`` as ``[x_1..x_M, y_1..y_N]``. Parameters
    pack ``A`` row-major followed by ``B`` row-major, so ``d = H (M + N)``.
    The model conditions on ``x``; the standard normal density of ``x`` is
    added as a parameter-free constant so values read as joint densities.
    The truth uses ``true_map`` (N x M, rank below ``H``); the prior is
    uniform on ``[-B, B]^d``.
    """

    def __init__(self, M: int = 2, N: int = 2, H: int = 2, true_map: Optional[Sequence] = None,
                 bound: float = 3.0, known_lambda: Optional[float] = None,
                 known_lambda_source: str = ""):
        self.M, self.N, self.H = int(M), int(N), int(H)
        if min(self.M, self.N, self.H) < 1:
            raise ModelError("M, N, H must be >= 1")
        self.bound = float(bound)
        if true_map is None:
            C0 = np.zeros((self.N, self.M))
            C0[0, 0] = 1.0
        else:
            C0 = np.asarray(true_map, dtype=float)
        if C0.shape != (self.N, self.M):
            raise ModelError(f"true_map must have shape ({self.N}, {self.M})")
        self.true_map = C0
        self.parameter_dim = self.H * (self.M + self.N)
        self.observation_dim = self.M + self.N
        self.lower = np.full(self.parameter_dim, -self.bound)
        self.upper = np.full(self.parameter_dim, self.bound)
        w0 = self._factor(C0)
        self.truth = TruthMeta(
            w0=w0,
            optimal_loss=0.5 * (self.M + self.N) * (LOG_2PI + 1.0),
            known_lambda=known_lambda,
            known_lambda_source=known_lambda_source,
        )

    def _factor(self, C0):
        U, s, Vt = np.linalg.svd(C0)
        r = int(np.sum(s > 1e-12))
        if r > self.H:
            raise ModelError(f"true_map has rank {r} > H = {self.H}")
        A0 = np.zeros((self.H, self.M))
        B0 = np.zeros((self.N, self.H))
        A0[:r] = np.sqrt(s[:r])[:, None] * Vt[:r]
        B0[:, :r] = U[:, :r] * np.sqrt(s[:r])[None, :]
        w0 = self.pack(A0, B0)
        if np.any(np.abs(w0) > self.bound):
            raise ModelError("true_map factorisation lies outside the parameter box")
        return w0

    def pack(self, A, B) -> np.ndarray:
        return np.concatenate([np.asarray(A, float).reshape(-1), np.asarray(B, float).reshape(-1)])

    def unpack(self, W):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        k = self.H * self.M
        A = W[:, :k].reshape(-1, self.H, self.M)
        B = W[:, k:].reshape(-1, self.N, self.H)
        return A, B

    def _residuals(self, X, W):
        X = np.asarray(X, dtype=float)
        self._check_dims(X, np.atleast_2d(W))
        A, B = self.unpack(W)
        x, y = X[:, : self.M], X[:, self.M:]
        Ax = np.einsum("shm,im->sih", A, x)
        pred = np.einsum("snh,sih->sin", B, Ax)
        return x, Ax, y[None, :, :] - pred

    def log_density_matrix(self, X, W):
        x, _, r = self._residuals(X, W)
        log_x = -0.5 * self.M * LOG_2PI - 0.5 * np.sum(x * x, axis=1)
        return (-0.5 * self.N * LOG_2PI - 0.5 * np.sum(r * r, axis=2)) + log_x[None, :]

    def log_prior(self, W):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        return np.zeros(W.shape[0])

    def grad_log_density_matrix(self, X, W):
        x, Ax, r = self._residuals(X, W)
        A, B = self.unpack(W)
        # d/dB = r (Ax)^T ; d/dA = (B^T r) x^T
        gB = np.einsum("sin,sih->sinh", r, Ax)
        Btr = np.einsum("snh,sin->sih", B, r)
        gA = np.einsum("sih,im->sihm", Btr, x)
        S, n = r.shape[:2]
        return np.concatenate([gA.reshape(S, n, -1), gB.reshape(S, n, -1)], axis=2)

    @property
    def has_gradient(self):
        return True

    @property
    def has_truth_sampler(self):
        return True

    def _sample(self, n, rng):
        x = rng.standard_normal((n, self.M))
        y = x @ self.true_map.T + rng.standard_normal((n, self.N))
        return np.hstack([x, y])


def build_model(spec: dict) -> Model:
    """Construct a model from a ``{"name": ..., **hyperparameters}`` mapping."""
    spec = dict(spec)
    name = spec.pop("name", None)
    factories = {
        "conjugate_normal": ConjugateNormalMeanModel,
        "gaussian_mixture": GaussianMixtureModel,
        "reduced_rank_regression": ReducedRankRegressionModel,
    }
    if name not in factories:
        raise ModelError(f"unknown model {name!r}; choose from {sorted(factories)}")
    try:
        return factories[name](**spec)
    except TypeError as exc:
        raise ModelError(f"bad hyperparameters for {name}: {exc}") from None
