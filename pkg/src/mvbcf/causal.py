"""Shared-tree causal sampler for vector outcomes (univariate as ``p = 1``).

The outcome model is ``Y_i = mu(x_i, pi_i) + tau(x_i) ∘ Z_i + eps_i`` with
``eps_i ~ N(0, Sigma)``: a prognostic ensemble and a treatment ensemble over
trees whose leaves hold length-``p`` vectors, so every outcome component
shares each tree's structure.  All leaf updates are conjugate: multivariate
normal leaf posteriors and an Inverse-Wishart residual covariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DecompositionError, MvbcfError, StandardizationError
from .kernels import CHOL_JITTER, sample_inv_wishart
from .scaling import OutcomeScale, check_standardized, standardize_outcomes
from .trees import (
    N_MIN_DEFAULT,
    FrozenTree,
    LeafStats,
    Tree,
    TreePriorConfig,
    apply_random_move,
    cutpoint_grids,
    freeze,
    log_tree_prior,
    suffstats_from_ids,
)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class LeafPrior:
    """MVN prior on a leaf parameter vector."""

    mean: np.ndarray  # (p,)
    cov: np.ndarray   # (p, p)

    @classmethod
    def isotropic(cls, p: int, variance: float, mean: Optional[np.ndarray] = None):
        mean = np.zeros(p) if mean is None else np.asarray(mean, dtype=float)
        return cls(mean, variance * np.eye(p))


@dataclass
class WishartPrior:
    df: float           # degrees of freedom, > p - 1
    scale: np.ndarray   # (p, p)


@dataclass
class CausalConfig:
    """Priors and sampler settings for the causal fit.

    ``None`` fields resolve to defaults: leaf variances ``1/num_mu_trees``
    and ``1/(4 * num_tau_trees)``, Wishart degrees ``p + 2`` with scale set
    from a constant-mean fit of the (standardized) outcomes.  The treatment
    trees get a flatter, more penalized structure prior than the prognostic
    trees.
    """

    p: int
    num_mu_trees: int = 50
    num_tau_trees: int = 20
    iterations: int = 1000
    burn_in: int = 500
    mu_tree_prior: TreePriorConfig = field(default_factory=lambda: TreePriorConfig(0.95, 2.0))
    tau_tree_prior: TreePriorConfig = field(default_factory=lambda: TreePriorConfig(0.25, 3.0))
    mu_leaf_var: Optional[float] = None
    tau_leaf_var: Optional[float] = None
    mu_prior_mean: Optional[np.ndarray] = None
    tau_prior_mean: Optional[np.ndarray] = None
    wishart_df: Optional[float] = None
    wishart_scale: Optional[np.ndarray] = None
    mu_covariates: Optional[list[int]] = None
    tau_covariates: Optional[list[int]] = None
    include_propensity: bool = True
    n_min: int = N_MIN_DEFAULT

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("outcome dimension p must be at least 1")
        if self.burn_in >= self.iterations:
            raise ValueError("burn_in must be smaller than iterations")

    def mu_leaf_prior(self) -> LeafPrior:
        var = self.mu_leaf_var if self.mu_leaf_var is not None else 1.0 / self.num_mu_trees
        return LeafPrior.isotropic(self.p, var, self.mu_prior_mean)

    def tau_leaf_prior(self) -> LeafPrior:
        var = (
            self.tau_leaf_var
            if self.tau_leaf_var is not None
            else 1.0 / (4.0 * self.num_tau_trees)
        )
        return LeafPrior.isotropic(self.p, var, self.tau_prior_mean)

    def wishart_prior(self, Y: np.ndarray) -> WishartPrior:
        df = self.wishart_df if self.wishart_df is not None else self.p + 2.0
        if self.wishart_scale is not None:
            scale = np.asarray(self.wishart_scale, dtype=float)
        else:
            scale = np.diag(np.var(Y, axis=0))
        return WishartPrior(float(df), scale)


@dataclass
class CausalDataset:
    """Covariates, vector outcomes, per-component treatments, propensity, weights.

    ``Z`` may be passed as a single column, in which case the same treatment
    applies to every outcome component.  Components of ``Z`` may differ per
    unit when a treatment touches one outcome but not another.
    """

    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    pi_hat: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float).T).T
        n, p = self.Y.shape
        Z = np.asarray(self.Z, dtype=float)
        if Z.ndim == 1:
            Z = np.repeat(Z[:, None], p, axis=1)
        self.Z = Z
        if self.X.shape[0] != n or self.Z.shape != (n, p):
            raise ValueError(
                f"inconsistent shapes: X {self.X.shape}, Y {self.Y.shape}, Z {self.Z.shape}"
            )
        if not np.isin(self.Z, (0.0, 1.0)).all():
            raise ValueError("treatment entries must be 0 or 1")
        if self.pi_hat is not None:
            self.pi_hat = np.asarray(self.pi_hat, dtype=float)
            if self.pi_hat.shape != (n,):
                raise ValueError("pi_hat must be one value per unit")
            if np.any(self.pi_hat <= 0.0) or np.any(self.pi_hat >= 1.0):
                raise ValueError("propensities must lie strictly inside (0, 1)")
        if self.weights is None:
            self.weights = np.ones(n)
        else:
            self.weights = np.asarray(self.weights, dtype=float)
            if self.weights.shape != (n,) or np.any(self.weights <= 0.0):
                raise ValueError("weights must be positive, one per unit")

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def p(self) -> int:
        return self.Y.shape[1]


@dataclass
class CausalDraws:
    """Kept posterior draws; arrays are indexed (draw, unit, component)."""

    mu: np.ndarray                      # (S, n, p)
    tau: np.ndarray                     # (S, n, p)
    yhat: np.ndarray                    # (S, n, p)
    sigma: np.ndarray                   # (S, p, p)
    mu_forests: list[list[FrozenTree]]
    tau_forests: list[list[FrozenTree]]
    chain_id: np.ndarray                # (S,)
    out_center: np.ndarray              # (S, p) map from forest scale to stored scale
    out_scale: np.ndarray               # (S, p), per draw so pooled chains replay correctly
    mu_covariates: Optional[list[int]] = None
    tau_covariates: Optional[list[int]] = None
    include_propensity: bool = True

    @property
    def n_draws(self) -> int:
        return self.tau.shape[0]

    @property
    def p(self) -> int:
        return self.tau.shape[2]

    def ate(self, weights: Optional[np.ndarray] = None) -> np.ndarray:
        """(S, p) weighted average treatment effect per draw."""
        if weights is None:
            return self.tau.mean(axis=1)
        weights = np.asarray(weights, dtype=float)
        return np.einsum("i,sip->sp", weights, self.tau) / weights.sum()


# -- closed-form leaf updates -------------------------------------------------


def _chol_batch(mats: np.ndarray, what: str) -> np.ndarray:
    """Batched Cholesky with one jittered retry, naming the failing leaf."""
    try:
        return np.linalg.cholesky(mats)
    except np.linalg.LinAlgError:
        pass
    p = mats.shape[-1]
    bump = CHOL_JITTER * np.trace(mats, axis1=-2, axis2=-1) / p
    bump = np.where(bump > 0, bump, CHOL_JITTER)
    jittered = mats + bump[..., None, None] * np.eye(p)
    try:
        return np.linalg.cholesky(jittered)
    except np.linalg.LinAlgError:
        for k in range(jittered.shape[0]):
            try:
                np.linalg.cholesky(jittered[k])
            except np.linalg.LinAlgError:
                raise DecompositionError(
                    f"{what} for leaf {k} is not positive definite: {mats[k]!r}"
                ) from None
        raise DecompositionError(f"{what} is not positive definite") from None


def _invert_spd(mat: np.ndarray, what: str):
    try:
        chol = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise DecompositionError(f"{what} is not positive definite: {mat!r}") from None
    inv_chol = np.linalg.inv(chol)
    inv = inv_chol.T @ inv_chol
    logdet = 2.0 * float(np.log(np.diag(chol)).sum())
    return 0.5 * (inv + inv.T), logdet


class _PriorTerms:
    """Precomputed pieces of a leaf prior reused across every tree update."""

    __slots__ = ("prec", "prec_mean", "quad_mean", "logdet_cov")

    def __init__(self, prior: LeafPrior):
        self.prec, self.logdet_cov = _invert_spd(prior.cov, "leaf prior covariance")
        self.prec_mean = self.prec @ prior.mean
        self.quad_mean = float(prior.mean @ self.prec_mean)


def _leaf_system(stats: LeafStats, sigma_inv: np.ndarray, terms: _PriorTerms,
                 treatment: bool):
    """Posterior precision A and linear term b for every leaf at once."""
    if treatment:
        if stats.zz is None:
            raise ValueError("treatment cross-terms missing from leaf statistics")
        A = stats.zz * sigma_inv[None, :, :] + terms.prec
        b = np.einsum("ab,kab->ka", sigma_inv, stats.zr) + terms.prec_mean
    else:
        A = stats.counts[:, None, None] * sigma_inv + terms.prec
        b = stats.rsum @ sigma_inv + terms.prec_mean
    return A, b


def _log_marginal_cached(stats: LeafStats, sigma_inv: np.ndarray, logdet_sigma: float,
                         terms: _PriorTerms, treatment: bool) -> float:
    p = sigma_inv.shape[0]
    A, b = _leaf_system(stats, sigma_inv, terms, treatment)
    chol_A = _chol_batch(A, "leaf posterior precision")
    logdet_A = 2.0 * np.log(np.diagonal(chol_A, axis1=-2, axis2=-1)).sum(axis=-1)
    x = np.linalg.solve(A, b[..., None])[..., 0]
    quad_b = np.einsum("ki,ki->k", b, x)
    quad_resid = np.einsum("kab,ab->k", stats.router, sigma_inv)
    per_leaf = (
        -0.5 * stats.counts * (p * _LOG_2PI + logdet_sigma)
        - 0.5 * terms.logdet_cov
        - 0.5 * logdet_A
        - 0.5 * (quad_resid + terms.quad_mean - quad_b)
    )
    return float(per_leaf.sum())


def _sample_leaves_cached(stats: LeafStats, sigma_inv: np.ndarray, terms: _PriorTerms,
                          treatment: bool, rng: np.random.Generator) -> np.ndarray:
    A, b = _leaf_system(stats, sigma_inv, terms, treatment)
    cov = np.linalg.inv(A)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    mean = np.einsum("kij,kj->ki", cov, b)
    chol = _chol_batch(cov, "leaf posterior covariance")
    noise = rng.standard_normal(mean.shape)
    return mean + np.einsum("kij,kj->ki", chol, noise)


def mu_log_marginal(stats: LeafStats, sigma: np.ndarray, prior: LeafPrior) -> float:
    """Log marginal likelihood of prognostic-leaf residuals, leaf means integrated out.

    Evaluates every leaf in ``stats`` and sums; includes all normalizing
    constants, so differences between candidate trees are exact MH log-ratios.
    """
    sigma_inv, logdet_sigma = _invert_spd(sigma, "residual covariance")
    return _log_marginal_cached(stats, sigma_inv, logdet_sigma, _PriorTerms(prior), False)


def tau_log_marginal(stats: LeafStats, sigma: np.ndarray, prior: LeafPrior) -> float:
    """Log marginal likelihood of treatment-leaf residuals.

    The per-row design is ``diag(Z_i)``, so the posterior precision couples
    ``Z_k' Z_k`` with the residual precision through a Hadamard product; rows
    with no treated components contribute through the noise term only.
    """
    sigma_inv, logdet_sigma = _invert_spd(sigma, "residual covariance")
    return _log_marginal_cached(stats, sigma_inv, logdet_sigma, _PriorTerms(prior), True)


def sample_mu_leaf(stats: LeafStats, sigma: np.ndarray, prior: LeafPrior,
                   rng: np.random.Generator) -> np.ndarray:
    """(K, p) conjugate posterior draws of the prognostic leaf vectors."""
    sigma_inv, _ = _invert_spd(sigma, "residual covariance")
    return _sample_leaves_cached(stats, sigma_inv, _PriorTerms(prior), False, rng)


def sample_tau_leaf(stats: LeafStats, sigma: np.ndarray, prior: LeafPrior,
                    rng: np.random.Generator) -> np.ndarray:
    """(K, p) conjugate posterior draws of the treatment leaf vectors."""
    sigma_inv, _ = _invert_spd(sigma, "residual covariance")
    return _sample_leaves_cached(stats, sigma_inv, _PriorTerms(prior), True, rng)


def update_sigma_matrix(Y: np.ndarray, Yhat: np.ndarray, prior: WishartPrior,
                        rng: np.random.Generator) -> np.ndarray:
    """Inverse-Wishart draw of the residual covariance given current fits."""
    resid = Y - Yhat
    S = resid.T @ resid
    scale = prior.scale + 0.5 * (S + S.T)
    return sample_inv_wishart(prior.df + Y.shape[0], scale, rng)


# -- the sampler ---------------------------------------------------------------


class _VectorForest:
    """Mutable ensemble state for either the mu or the tau trees."""

    def __init__(self, num_trees: int, n: int, p: int, X: np.ndarray,
                 tree_prior: TreePriorConfig, leaf_prior: LeafPrior, n_min: int):
        self.X = X
        self.tree_prior = tree_prior
        self.prior_terms = _PriorTerms(leaf_prior)
        self.n_min = n_min
        self.grids = cutpoint_grids(X)
        self.trees = [Tree.stump(p) for _ in range(num_trees)]
        self.leaf_ids = [np.zeros(n, dtype=np.intp) for _ in range(num_trees)]
        self.counts = [np.array([n]) for _ in range(num_trees)]
        self.fits = [np.zeros((n, p)) for _ in range(num_trees)]
        self.log_priors = [log_tree_prior(t, tree_prior) for t in self.trees]

    def total(self) -> np.ndarray:
        return np.sum(np.stack(self.fits), axis=0)

    def update_tree(self, j: int, resid: np.ndarray, sigma_inv: np.ndarray,
                    logdet_sigma: float, rng: np.random.Generator,
                    Z: Optional[np.ndarray]) -> np.ndarray:
        """MH structure step plus leaf draw for tree ``j``; returns its new fit."""
        treatment = Z is not None
        tree = self.trees[j]
        move = apply_random_move(tree, self.X, self.tree_prior, rng,
                                 self.leaf_ids[j], self.counts[j],
                                 self.grids, self.n_min)
        stats = suffstats_from_ids(self.leaf_ids[j], self.counts[j].size, resid, Z)
        if move is not None:
            new_stats = suffstats_from_ids(
                move.leaf_ids, move.counts.size, resid, Z)
            log_ratio = (
                _log_marginal_cached(new_stats, sigma_inv, logdet_sigma,
                                     self.prior_terms, treatment)
                - _log_marginal_cached(stats, sigma_inv, logdet_sigma,
                                       self.prior_terms, treatment)
                + move.log_prior_delta
                + move.log_transition_ratio
            )
            if not math.isfinite(log_ratio):
                raise MvbcfError(f"non-finite acceptance log-ratio for tree {j}")
            if math.log(max(rng.random(), 1e-300)) < log_ratio:
                self.leaf_ids[j] = move.leaf_ids
                self.counts[j] = move.counts
                self.log_priors[j] += move.log_prior_delta
                stats = new_stats
            else:
                move.undo()
        values = _sample_leaves_cached(stats, sigma_inv, self.prior_terms, treatment, rng)
        tree.set_leaf_values(values)
        fit = values[self.leaf_ids[j]]
        self.fits[j] = fit
        return fit

    def frozen(self) -> list[FrozenTree]:
        return [freeze(t) for t in self.trees]


def _covariate_matrices(dataset: CausalDataset, config: CausalConfig):
    mu_cols = config.mu_covariates
    tau_cols = config.tau_covariates
    X_mu = dataset.X if mu_cols is None else dataset.X[:, mu_cols]
    X_tau = dataset.X if tau_cols is None else dataset.X[:, tau_cols]
    if config.include_propensity:
        if dataset.pi_hat is None:
            raise MvbcfError(
                "configuration error: propensity scores are required as a "
                "prognostic covariate but dataset.pi_hat is missing"
            )
        X_mu = np.column_stack([X_mu, dataset.pi_hat])
    return X_mu, X_tau


def fit_causal(dataset: CausalDataset, config: CausalConfig,
               rng: np.random.Generator) -> CausalDraws:
    """Backfitting MCMC over the prognostic and treatment ensembles.

    Expects standardized outcomes (each component mean 0, sd 1); use
    :func:`fit_causal_model` to fit raw outcomes and get draws mapped back to
    the original scale.  One call is one chain.
    """
    if dataset.p != config.p:
        raise ValueError(f"dataset has p={dataset.p} but config.p={config.p}")
    sd = dataset.Y.std(axis=0)
    if np.any(sd == 0.0):
        bad = [int(k) for k in np.flatnonzero(sd == 0.0)]
        raise StandardizationError(f"degenerate outcome: component(s) {bad} are constant")
    check_standardized(dataset.Y)
    n, p = dataset.n, dataset.p
    if n < 2 * config.n_min:
        raise ValueError(f"need at least {2 * config.n_min} rows, got {n}")
    X_mu, X_tau = _covariate_matrices(dataset, config)
    Y, Z = dataset.Y, dataset.Z

    mu_forest = _VectorForest(config.num_mu_trees, n, p, X_mu,
                              config.mu_tree_prior, config.mu_leaf_prior(), config.n_min)
    tau_forest = _VectorForest(config.num_tau_trees, n, p, X_tau,
                               config.tau_tree_prior, config.tau_leaf_prior(), config.n_min)
    wishart = config.wishart_prior(Y)
    sigma = np.eye(p)

    kept = config.iterations - config.burn_in
    mu_draws = np.empty((kept, n, p))
    tau_draws = np.empty((kept, n, p))
    yhat_draws = np.empty((kept, n, p))
    sigma_draws = np.empty((kept, p, p))
    mu_forests: list[list[FrozenTree]] = []
    tau_forests: list[list[FrozenTree]] = []

    total = mu_forest.total() + tau_forest.total() * Z
    for it in range(config.iterations):
        sigma_inv, logdet_sigma = _invert_spd(sigma, "residual covariance")
        for j in range(config.num_mu_trees):
            resid = Y - (total - mu_forest.fits[j])
            old_fit = mu_forest.fits[j]
            new_fit = mu_forest.update_tree(j, resid, sigma_inv, logdet_sigma, rng, None)
            total = total + (new_fit - old_fit)
        for j in range(config.num_tau_trees):
            resid = Y - (total - tau_forest.fits[j] * Z)
            old_fit = tau_forest.fits[j]
            new_fit = tau_forest.update_tree(j, resid, sigma_inv, logdet_sigma, rng, Z)
            total = total + (new_fit - old_fit) * Z
        mu_hat = mu_forest.total()
        tau_hat = tau_forest.total()
        yhat = mu_hat + tau_hat * Z
        total = yhat
        sigma = update_sigma_matrix(Y, yhat, wishart, rng)
        if it >= config.burn_in:
            k = it - config.burn_in
            mu_draws[k] = mu_hat
            tau_draws[k] = tau_hat
            yhat_draws[k] = yhat
            sigma_draws[k] = sigma
            mu_forests.append(mu_forest.frozen())
            tau_forests.append(tau_forest.frozen())

    return CausalDraws(
        mu=mu_draws, tau=tau_draws, yhat=yhat_draws, sigma=sigma_draws,
        mu_forests=mu_forests, tau_forests=tau_forests,
        chain_id=np.zeros(kept, dtype=int),
        out_center=np.zeros((kept, p)), out_scale=np.ones((kept, p)),
        mu_covariates=config.mu_covariates, tau_covariates=config.tau_covariates,
        include_propensity=config.include_propensity,
    )


def fit_causal_model(dataset: CausalDataset, config: CausalConfig,
                     rng: np.random.Generator, chain_id: int = 0) -> CausalDraws:
    """Standardize outcomes, run :func:`fit_causal`, map draws back to raw scale."""
    Y_std, fit_scale = standardize_outcomes(dataset.Y)
    std_dataset = CausalDataset(dataset.X, Y_std, dataset.Z,
                                pi_hat=dataset.pi_hat, weights=dataset.weights)
    draws = fit_causal(std_dataset, config, rng)
    return _rescale_draws(draws, fit_scale, std_dataset.Z, chain_id)


def _rescale_draws(draws: CausalDraws, fit_scale: OutcomeScale, Z: np.ndarray,
                   chain_id: int) -> CausalDraws:
    S = draws.n_draws
    mu = draws.mu * fit_scale.scale + fit_scale.center
    tau = draws.tau * fit_scale.scale
    yhat = mu + tau * Z
    sigma = draws.sigma * np.outer(fit_scale.scale, fit_scale.scale)
    return CausalDraws(
        mu=mu, tau=tau, yhat=yhat, sigma=sigma,
        mu_forests=draws.mu_forests, tau_forests=draws.tau_forests,
        chain_id=np.full(S, chain_id, dtype=int),
        out_center=np.tile(fit_scale.center, (S, 1)),
        out_scale=np.tile(fit_scale.scale, (S, 1)),
        mu_covariates=draws.mu_covariates, tau_covariates=draws.tau_covariates,
        include_propensity=draws.include_propensity,
    )


def predict_causal(draws: CausalDraws, X_new: np.ndarray, Z_new: np.ndarray,
                   pi_new: Optional[np.ndarray] = None):
    """Replay the stored ensembles at new units.

    Returns ``(mu, tau, yhat)`` arrays of shape (S, n_new, p) on the same
    scale as the stored draws.  ``pi_new`` is required when the fit used the
    propensity as a prognostic covariate.
    """
    X_new = np.asarray(X_new, dtype=float)
    p = draws.p
    Z_new = np.asarray(Z_new, dtype=float)
    if Z_new.ndim == 1:
        Z_new = np.repeat(Z_new[:, None], p, axis=1)
    if X_new.ndim != 2:
        raise ValueError("X_new must be a 2-D covariate matrix")
    X_mu = X_new if draws.mu_covariates is None else X_new[:, draws.mu_covariates]
    X_tau = X_new if draws.tau_covariates is None else X_new[:, draws.tau_covariates]
    if draws.include_propensity:
        if pi_new is None:
            raise ValueError("pi_new is required: the fit used the propensity covariate")
        X_mu = np.column_stack([X_mu, np.asarray(pi_new, dtype=float)])
    n_new = X_new.shape[0]
    S = draws.n_draws
    mu = np.empty((S, n_new, p))
    tau = np.empty((S, n_new, p))
    for s in range(S):
        mu[s] = np.sum(np.stack([t.evaluate(X_mu) for t in draws.mu_forests[s]]), axis=0)
        tau[s] = np.sum(np.stack([t.evaluate(X_tau) for t in draws.tau_forests[s]]), axis=0)
    mu = mu * draws.out_scale[:, None, :] + draws.out_center[:, None, :]
    tau = tau * draws.out_scale[:, None, :]
    yhat = mu + tau * Z_new
    return mu, tau, yhat


def replay_tau(draws: CausalDraws, X_new: np.ndarray) -> np.ndarray:
    """(S, n_new, p) treatment-effect draws at new covariates (stored scale)."""
    X_new = np.asarray(X_new, dtype=float)
    X_tau = X_new if draws.tau_covariates is None else X_new[:, draws.tau_covariates]
    S = draws.n_draws
    tau = np.empty((S, X_new.shape[0], draws.p))
    for s in range(S):
        tau[s] = np.sum(np.stack([t.evaluate(X_tau) for t in draws.tau_forests[s]]), axis=0)
    return tau * draws.out_scale[:, None, :]
