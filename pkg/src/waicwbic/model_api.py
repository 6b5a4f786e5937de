"""Statistical-model abstraction, datasets, and the empirical/expected losses.

A model evaluates ``log p(x|w)`` for a batch of parameters against a batch
of observations in one call; every consumer (sampler, criteria, oracle)
goes through :meth:`Model.log_density_matrix`.
"""

from __future__ import annotations

import abc
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class ModelError(ValueError):
    """Raised for invalid model inputs or non-finite log-densities."""


@dataclass(frozen=True)
class Dataset:
    """Immutable set of ``n`` observations, each a real vector of dimension ``p``."""

    observations: np.ndarray

    def __post_init__(self):
        obs = np.array(self.observations, dtype=float)
        if obs.ndim == 1:
            obs = obs[:, None]
        if obs.ndim != 2:
            raise ModelError("observations must be a 2-D array of shape (n, p)")
        if obs.shape[0] < 1 or obs.shape[1] < 1:
            raise ModelError("dataset must contain at least one observation of dimension >= 1")
        obs.setflags(write=False)
        object.__setattr__(self, "observations", obs)

    @property
    def n(self) -> int:
        return self.observations.shape[0]

    @property
    def p(self) -> int:
        return self.observations.shape[1]

    def __len__(self):
        return self.n

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(np.vstack([self.observations, other.observations]))


@dataclass(frozen=True)
class TruthMeta:
    """Optional closed-form facts about the data-generating process.

    ``known_lambda`` is always supplied by whoever configures the model,
    together with a free-text ``known_lambda_source``.
    """

    w0: Optional[np.ndarray] = None
    optimal_loss: Optional[float] = None
    known_lambda: Optional[float] = None
    known_lambda_source: str = ""


def wbic_beta(n: int) -> float:
    """Inverse temperature ``1 / log n`` used by WBIC."""
    if n < 2:
        raise ModelError(f"n must be >= 2 for the WBIC temperature, got {n}")
    return 1.0 / math.log(n)


def check_beta(beta: float) -> float:
    beta = float(beta)
    if not (math.isfinite(beta) and beta > 0):
        raise ModelError(f"inverse temperature must be finite and > 0, got {beta}")
    return beta


class Model(abc.ABC):
    """Base class for models ``p(x|w)`` with a box-constrained parameter.

    Subclasses implement :meth:`log_density_matrix` and :meth:`log_prior`;
    gradients and a truth sampler are optional. The prior only needs to be
    known up to an additive constant.
    """

    parameter_dim: int
    observation_dim: int
    lower: np.ndarray
    upper: np.ndarray
    truth: Optional[TruthMeta] = None

    @abc.abstractmethod
    def log_density_matrix(self, X: np.ndarray, W: np.ndarray) -> np.ndarray:
        """Return ``log p(X[i] | W[s])`` as an array of shape ``(len(W), len(X))``."""

    @abc.abstractmethod
    def log_prior(self, W: np.ndarray) -> np.ndarray:
        """Unnormalised log prior for each row of ``W``; shape ``(len(W),)``."""

    def grad_log_density_matrix(self, X: np.ndarray, W: np.ndarray) -> np.ndarray:
        """Gradient of ``log p(X[i]|W[s])`` w.r.t. ``W[s]``; shape ``(len(W), len(X), d)``."""
        raise NotImplementedError(f"{type(self).__name__} does not provide gradients")

    def log_likelihood_sum(self, X: np.ndarray, W: np.ndarray) -> np.ndarray:
        """``sum_i log p(X[i]|W[s])`` per row of ``W``; override with sufficient statistics."""
        return self.log_density_matrix(X, W).sum(axis=1)

    def grad_log_likelihood_sum(self, X: np.ndarray, W: np.ndarray) -> np.ndarray:
        return self.grad_log_density_matrix(X, W).sum(axis=1)

    def grad_log_prior(self, W: np.ndarray) -> np.ndarray:
        return np.zeros_like(np.atleast_2d(W), dtype=float)

    @property
    def has_gradient(self) -> bool:
        return False

    def _sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    @property
    def has_truth_sampler(self) -> bool:
        return False

    # scalar conveniences

    def log_density(self, x, w) -> float:
        x = np.asarray(x, dtype=float).reshape(1, -1)
        w = np.asarray(w, dtype=float).reshape(1, -1)
        self._check_dims(x, w)
        return float(self.log_density_matrix(x, w)[0, 0])

    def log_density_gradient(self, x, w) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(1, -1)
        w = np.asarray(w, dtype=float).reshape(1, -1)
        self._check_dims(x, w)
        return self.grad_log_density_matrix(x, w)[0, 0]

    def in_bounds(self, W: np.ndarray) -> np.ndarray:
        W = np.atleast_2d(W)
        return np.all((W >= self.lower) & (W <= self.upper), axis=-1)

    def check_parameter(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float).reshape(-1)
        if w.shape[0] != self.parameter_dim:
            raise ModelError(f"parameter has dimension {w.shape[0]}, model expects {self.parameter_dim}")
        if not self.in_bounds(w)[0]:
            raise ModelError(f"parameter {w} lies outside the model bounds")
        return w

    def _check_dims(self, X: np.ndarray, W: np.ndarray):
        if X.shape[-1] != self.observation_dim:
            raise ModelError(f"observation dimension {X.shape[-1]} != model dimension {self.observation_dim}")
        if W.shape[-1] != self.parameter_dim:
            raise ModelError(f"parameter dimension {W.shape[-1]} != model dimension {self.parameter_dim}")


def sample_truth(model: Model, n: int, seed: int) -> Dataset:
    """Draw ``n`` i.i.d. observations from the model's true distribution."""
    if n < 2:
        raise ModelError(f"n must be >= 2, got {n}")
    if not model.has_truth_sampler:
        raise ModelError(
            f"{type(model).__name__} has no truth sampler; load external data with load_csv instead"
        )
    rng = np.random.default_rng(seed)
    return Dataset(model._sample(n, rng))


def _per_datum_logp(model: Model, data: Dataset, w) -> np.ndarray:
    w = model.check_parameter(w)
    X = data.observations
    model._check_dims(X, w[None, :])
    logp = model.log_density_matrix(X, w[None, :])[0]
    bad = np.flatnonzero(~np.isfinite(logp))
    if bad.size:
        raise ModelError(f"non-finite log-density at observation index {int(bad[0])}")
    return logp


def empirical_loss(model: Model, data: Dataset, w) -> float:
    """``L_n(w) = -(1/n) sum_i log p(X_i|w)``."""
    return float(-np.mean(_per_datum_logp(model, data, w)))


def expected_loss_mc(model: Model, w, test_draws: Dataset) -> float:
    """Monte Carlo estimate of ``L(w)`` from fresh draws of the true distribution."""
    return empirical_loss(model, test_draws, w)


def expected_loss_mc_se(model: Model, w, test_draws: Dataset) -> tuple[float, float]:
    """Like :func:`expected_loss_mc` but also returns the standard error."""
    nl = -_per_datum_logp(model, test_draws, w)
    se = float(np.std(nl, ddof=1) / math.sqrt(nl.size)) if nl.size > 1 else math.inf
    return float(nl.mean()), se


def load_csv(path, dim: Optional[int] = None) -> Dataset:
    """Read one observation per row; a non-numeric first row is treated as a header."""
    rows: list[list[float]] = []
    with open(Path(path), newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh)):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                if lineno == 0 and not rows:
                    continue
                raise ModelError(f"{path}:{lineno + 1}: non-numeric value in {row}")
    if not rows:
        raise ModelError(f"{path}: no observations")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ModelError(f"{path}: rows have differing numbers of columns {sorted(widths)}")
    obs = np.asarray(rows, dtype=float)
    if dim is not None and obs.shape[1] != dim:
        raise ModelError(f"{path}: expected {dim} columns, found {obs.shape[1]}")
    return Dataset(obs)


@dataclass
class PriorShifted(Model):
    """Wraps a model and adds a constant to its log prior."""

    base: Model
    offset: float = 0.0
    truth: Optional[TruthMeta] = field(default=None, init=False)

    def __post_init__(self):
        self.parameter_dim = self.base.parameter_dim
        self.observation_dim = self.base.observation_dim
        self.lower = self.base.lower
        self.upper = self.base.upper
        self.truth = self.base.truth

    def log_density_matrix(self, X, W):
        return self.base.log_density_matrix(X, W)

    def log_prior(self, W):
        return self.base.log_prior(W) + self.offset

    def grad_log_density_matrix(self, X, W):
        return self.base.grad_log_density_matrix(X, W)

    def log_likelihood_sum(self, X, W):
        return self.base.log_likelihood_sum(X, W)

    def grad_log_likelihood_sum(self, X, W):
        return self.base.grad_log_likelihood_sum(X, W)

    def grad_log_prior(self, W):
        return self.base.grad_log_prior(W)

    @property
    def has_gradient(self):
        return self.base.has_gradient

    @property
    def has_truth_sampler(self):
        return self.base.has_truth_sampler

    def _sample(self, n, rng):
        return self.base._sample(n, rng)


def as_dataset(values: Sequence) -> Dataset:
    return values if isinstance(values, Dataset) else Dataset(np.asarray(values, dtype=float))
