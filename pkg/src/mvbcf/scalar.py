"""Univariate Bayesian Causal Forest with scalar-arithmetic leaf updates.

This is a standalone single-outcome sampler: prognostic and treatment
ensembles under the same decomposition ``y = mu(x, pi) + tau(x) z + eps`` but
with plain scalar conjugate formulas and the Gamma noise prior throughout.
It doubles as an independent cross-check of the matrix sampler at ``p = 1``
and as the univariate baseline in the benchmark.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bart import NoisePrior, UnivariateForest, update_sigma_univariate
from .errors import MvbcfError
from .scaling import check_standardized, standardize_outcomes
from .trees import (
    N_MIN_DEFAULT,
    FrozenTree,
    Tree,
    TreePriorConfig,
    apply_random_move,
    cutpoint_grids,
    freeze,
    log_tree_prior,
)


@dataclass
class ScalarBcfConfig:
    num_mu_trees: int = 50
    num_tau_trees: int = 20
    iterations: int = 1000
    burn_in: int = 500
    mu_tree_prior: TreePriorConfig = field(default_factory=lambda: TreePriorConfig(0.95, 2.0))
    tau_tree_prior: TreePriorConfig = field(default_factory=lambda: TreePriorConfig(0.25, 3.0))
    mu_leaf_var: Optional[float] = None   # default 1 / num_mu_trees
    tau_leaf_var: Optional[float] = None  # default 1 / (4 * num_tau_trees)
    noise_prior: NoisePrior = field(default_factory=NoisePrior)
    include_propensity: bool = True
    n_min: int = N_MIN_DEFAULT

    def __post_init__(self):
        if self.burn_in >= self.iterations:
            raise ValueError("burn_in must be smaller than iterations")

    @property
    def mu_var(self) -> float:
        return self.mu_leaf_var if self.mu_leaf_var is not None else 1.0 / self.num_mu_trees

    @property
    def tau_var(self) -> float:
        return (
            self.tau_leaf_var
            if self.tau_leaf_var is not None
            else 1.0 / (4.0 * self.num_tau_trees)
        )


@dataclass
class ScalarBcfDraws:
    sigma: np.ndarray                    # (S,) noise sd on the stored scale
    mu: np.ndarray                       # (S, n)
    tau: np.ndarray                      # (S, n)
    yhat: np.ndarray                     # (S, n)
    mu_forests: list[list[FrozenTree]]
    tau_forests: list[list[FrozenTree]]
    out_center: float = 0.0
    out_scale: float = 1.0
    include_propensity: bool = True

    @property
    def n_draws(self) -> int:
        return self.tau.shape[0]

    def ate(self, weights: Optional[np.ndarray] = None) -> np.ndarray:
        if weights is None:
            return self.tau.mean(axis=1)
        weights = np.asarray(weights, dtype=float)
        return self.tau @ weights / weights.sum()


class _TauScalarForest:
    """Treatment ensemble: each row contributes its leaf value only when treated."""

    def __init__(self, num_trees: int, n: int, X: np.ndarray, prior: TreePriorConfig,
                 leaf_var: float, n_min: int, z: np.ndarray):
        self.X = X
        self.prior = prior
        self.leaf_var = leaf_var
        self.n_min = n_min
        self.z = z
        self.grids = cutpoint_grids(X)
        self.trees = [Tree.stump(1) for _ in range(num_trees)]
        self.leaf_ids = [np.zeros(n, dtype=np.intp) for _ in range(num_trees)]
        self.counts = [np.array([n]) for _ in range(num_trees)]
        self.fits = [np.zeros(n) for _ in range(num_trees)]  # raw tau per row
        self.log_priors = [log_tree_prior(t, prior) for t in self.trees]

    def total(self) -> np.ndarray:
        return np.sum(np.stack(self.fits), axis=0)

    def _stats(self, ids: np.ndarray, n_leaves: int, resid: np.ndarray):
        m = np.bincount(ids, minlength=n_leaves).astype(float)
        treated = np.bincount(ids, weights=self.z, minlength=n_leaves)
        zr = np.bincount(ids, weights=self.z * resid, minlength=n_leaves)
        q = np.bincount(ids, weights=resid * resid, minlength=n_leaves)
        return m, treated, zr, q

    def _log_marginal(self, m, treated, zr, q, sigma2: float) -> float:
        # r_i ~ N(z_i * tau, sigma2) with tau ~ N(0, leaf_var): only treated
        # rows inform tau, every row contributes the noise term.
        precision = 1.0 / self.leaf_var + treated / sigma2
        terms = (
            -0.5 * m * math.log(2.0 * math.pi * sigma2)
            - 0.5 * np.log(self.leaf_var * precision)
            - 0.5 * (q / sigma2 - (zr / sigma2) ** 2 / precision)
        )
        return float(terms.sum())

    def sweep(self, target: np.ndarray, running: np.ndarray, sigma2: float,
              rng: np.random.Generator) -> np.ndarray:
        for j, tree in enumerate(self.trees):
            resid = target - (running - self.fits[j] * self.z)
            ids, counts = self.leaf_ids[j], self.counts[j]
            move = apply_random_move(tree, self.X, self.prior, rng, ids, counts,
                                     self.grids, self.n_min)
            old = self._stats(ids, counts.size, resid)
            if move is not None:
                new = self._stats(move.leaf_ids, move.counts.size, resid)
                log_ratio = (
                    self._log_marginal(*new, sigma2)
                    - self._log_marginal(*old, sigma2)
                    + move.log_prior_delta
                    + move.log_transition_ratio
                )
                if not math.isfinite(log_ratio):
                    raise MvbcfError(f"non-finite acceptance log-ratio for tau tree {j}")
                if math.log(max(rng.random(), 1e-300)) < log_ratio:
                    ids = self.leaf_ids[j] = move.leaf_ids
                    self.counts[j] = move.counts
                    self.log_priors[j] += move.log_prior_delta
                    old = new
                else:
                    move.undo()
            _, treated, zr, _ = old
            precision = 1.0 / self.leaf_var + treated / sigma2
            post_var = 1.0 / precision
            post_mean = post_var * zr / sigma2
            values = post_mean + np.sqrt(post_var) * rng.standard_normal(post_mean.size)
            tree.set_leaf_values(values[:, None])
            new_fit = values[ids]
            running = running + (new_fit - self.fits[j]) * self.z
            self.fits[j] = new_fit
        return running

    def frozen(self) -> list[FrozenTree]:
        return [freeze(t) for t in self.trees]


def fit_bcf_scalar(y: np.ndarray, X: np.ndarray, z: np.ndarray,
                   pi_hat: Optional[np.ndarray], config: ScalarBcfConfig,
                   rng: np.random.Generator) -> ScalarBcfDraws:
    """Backfitting MCMC for the univariate causal decomposition.

    ``y`` must be standardized.  The propensity enters the prognostic
    covariates only.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    z = np.asarray(z, dtype=float)
    check_standardized(y)
    if not np.isin(z, (0.0, 1.0)).all():
        raise ValueError("treatment entries must be 0 or 1")
    if config.include_propensity:
        if pi_hat is None:
            raise MvbcfError("configuration error: propensity scores missing")
        X_mu = np.column_stack([X, np.asarray(pi_hat, dtype=float)])
    else:
        X_mu = X
    n = y.size
    noise = config.noise_prior.resolved(y)
    mu_forest = UnivariateForest(config.num_mu_trees, n, X_mu, config.mu_tree_prior,
                                 config.mu_var, config.n_min)
    tau_forest = _TauScalarForest(config.num_tau_trees, n, X, config.tau_tree_prior,
                                  config.tau_var, config.n_min, z)
    sigma2 = 1.0
    kept = config.iterations - config.burn_in
    sigma_draws = np.empty(kept)
    mu_draws = np.empty((kept, n))
    tau_draws = np.empty((kept, n))
    yhat_draws = np.empty((kept, n))
    mu_forests: list[list[FrozenTree]] = []
    tau_forests: list[list[FrozenTree]] = []

    running = mu_forest.total_fit() + tau_forest.total() * z
    for it in range(config.iterations):
        running = mu_forest.sweep(y, running, sigma2, rng)
        running = tau_forest.sweep(y, running, sigma2, rng)
        mu_hat = mu_forest.total_fit()
        tau_hat = tau_forest.total()
        yhat = mu_hat + tau_hat * z
        running = yhat
        sigma2 = update_sigma_univariate(y - yhat, noise, rng)
        if it >= config.burn_in:
            k = it - config.burn_in
            sigma_draws[k] = math.sqrt(sigma2)
            mu_draws[k] = mu_hat
            tau_draws[k] = tau_hat
            yhat_draws[k] = yhat
            mu_forests.append(mu_forest.frozen())
            tau_forests.append(tau_forest.frozen())
    return ScalarBcfDraws(sigma_draws, mu_draws, tau_draws, yhat_draws,
                          mu_forests, tau_forests,
                          include_propensity=config.include_propensity)


def fit_bcf_scalar_model(y: np.ndarray, X: np.ndarray, z: np.ndarray,
                         pi_hat: Optional[np.ndarray], config: ScalarBcfConfig,
                         rng: np.random.Generator) -> ScalarBcfDraws:
    """Standardize ``y``, fit, and map the draws back to the original scale."""
    y_std, fit_scale = standardize_outcomes(y)
    draws = fit_bcf_scalar(y_std[:, 0], X, z, pi_hat, config, rng)
    center = float(fit_scale.center[0])
    scale = float(fit_scale.scale[0])
    mu = draws.mu * scale + center
    tau = draws.tau * scale
    z_arr = np.asarray(z, dtype=float)
    return ScalarBcfDraws(
        sigma=draws.sigma * scale,
        mu=mu, tau=tau, yhat=mu + tau * z_arr,
        mu_forests=draws.mu_forests, tau_forests=draws.tau_forests,
        out_center=center, out_scale=scale,
        include_propensity=draws.include_propensity,
    )


def predict_bcf_scalar(draws: ScalarBcfDraws, X_new: np.ndarray, z_new: np.ndarray,
                       pi_new: Optional[np.ndarray] = None):
    """Replay stored ensembles at new units; returns (mu, tau, yhat) draws."""
    X_new = np.asarray(X_new, dtype=float)
    z_new = np.asarray(z_new, dtype=float)
    if draws.include_propensity:
        if pi_new is None:
            raise ValueError("pi_new is required: the fit used the propensity covariate")
        X_mu = np.column_stack([X_new, np.asarray(pi_new, dtype=float)])
    else:
        X_mu = X_new
    S = draws.n_draws
    n_new = X_new.shape[0]
    mu = np.empty((S, n_new))
    tau = np.empty((S, n_new))
    for s in range(S):
        mu[s] = np.sum(np.stack([t.evaluate(X_mu)[:, 0] for t in draws.mu_forests[s]]), axis=0)
        tau[s] = np.sum(np.stack([t.evaluate(X_new)[:, 0] for t in draws.tau_forests[s]]), axis=0)
    mu = mu * draws.out_scale + draws.out_center
    tau = tau * draws.out_scale
    yhat = mu + tau * z_new
    return mu, tau, yhat
