"""Univariate BART: backfitting sampler, probit propensity model, S-learner.

The backfitting sweep over univariate trees lives here and is reused by the
scalar Bayesian Causal Forest sampler for its prognostic ensemble.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import chi2

from .errors import MvbcfError, OverlapError
from .kernels import sample_gamma
from .scaling import check_standardized
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

PROPENSITY_CLIP = (0.025, 0.975)


@dataclass
class NoisePrior:
    """Gamma prior on the precision: 1/sigma^2 ~ Ga(nu/2, nu*lam/2)."""

    nu: float = 3.0
    lam: Optional[float] = None  # None: calibrated from the data at fit time

    def resolved(self, y: np.ndarray, quantile: float = 0.9) -> "NoisePrior":
        """Pick lam so the prior puts ``quantile`` mass on sigma < sd(y)."""
        if self.lam is not None:
            return self
        lam = chi2.ppf(1.0 - quantile, self.nu) * np.var(y) / self.nu
        return NoisePrior(self.nu, float(lam))


@dataclass
class BartConfig:
    num_trees: int = 50
    iterations: int = 1000
    burn_in: int = 500
    tree_prior: TreePriorConfig = field(default_factory=TreePriorConfig)
    leaf_sd: Optional[float] = None  # None: 1/sqrt(num_trees)
    noise_prior: NoisePrior = field(default_factory=NoisePrior)
    n_min: int = N_MIN_DEFAULT

    def __post_init__(self):
        if self.num_trees <= 0 or self.iterations <= 0 or self.burn_in <= 0:
            raise ValueError("num_trees, iterations and burn_in must be positive")
        if self.burn_in >= self.iterations:
            raise ValueError(
                f"burn_in ({self.burn_in}) must be smaller than iterations ({self.iterations})"
            )

    @property
    def leaf_var(self) -> float:
        sd = self.leaf_sd if self.leaf_sd is not None else 1.0 / math.sqrt(self.num_trees)
        return sd * sd


@dataclass
class BartDraws:
    """Kept posterior draws of a univariate BART fit."""

    sigma: np.ndarray                   # (S,)
    yhat: np.ndarray                    # (S, n)
    forests: list[list[FrozenTree]]     # per kept iteration


def predict_bart(draws: BartDraws, X_new: np.ndarray) -> np.ndarray:
    """(S, n_new) sum-of-trees predictions replayed from the stored forests."""
    out = np.empty((len(draws.forests), X_new.shape[0]))
    for s, forest in enumerate(draws.forests):
        out[s] = np.sum(np.stack([t.evaluate(X_new)[:, 0] for t in forest]), axis=0)
    return out


# -- backfitting core ---------------------------------------------------------


class UnivariateForest:
    """Mutable state of one sum-of-trees ensemble with scalar leaves."""

    def __init__(self, num_trees: int, n: int, X: np.ndarray, prior: TreePriorConfig,
                 leaf_var: float, n_min: int, grids=None):
        self.X = X
        self.prior = prior
        self.leaf_var = leaf_var
        self.n_min = n_min
        self.grids = grids if grids is not None else cutpoint_grids(X)
        self.trees = [Tree.stump(1) for _ in range(num_trees)]
        self.leaf_ids = [np.zeros(n, dtype=np.intp) for _ in range(num_trees)]
        self.counts = [np.array([n]) for _ in range(num_trees)]
        self.fits = [np.zeros(n) for _ in range(num_trees)]
        self.log_priors = [log_tree_prior(t, prior) for t in self.trees]

    def total_fit(self) -> np.ndarray:
        """Canonical sum of per-tree contributions (stable summation order)."""
        return np.sum(np.stack(self.fits), axis=0)

    def sweep(self, target: np.ndarray, running: np.ndarray, sigma2: float,
              rng: np.random.Generator) -> np.ndarray:
        """One pass over every tree; ``running`` is the current total fit."""
        for j, tree in enumerate(self.trees):
            resid = target - (running - self.fits[j])
            ids, counts = self.leaf_ids[j], self.counts[j]
            move = apply_random_move(tree, self.X, self.prior, rng, ids, counts,
                                     self.grids, self.n_min)
            m, s, q = _uni_stats(ids, counts.size, resid)
            if move is not None:
                new_m, new_s, new_q = _uni_stats(
                    move.leaf_ids, move.counts.size, resid)
                log_ratio = (
                    _uni_log_marginal(new_m, new_s, new_q, sigma2, self.leaf_var)
                    - _uni_log_marginal(m, s, q, sigma2, self.leaf_var)
                    + move.log_prior_delta
                    + move.log_transition_ratio
                )
                if not math.isfinite(log_ratio):
                    raise MvbcfError(f"non-finite acceptance log-ratio for tree {j}")
                if math.log(max(rng.random(), 1e-300)) < log_ratio:
                    ids = self.leaf_ids[j] = move.leaf_ids
                    self.counts[j] = move.counts
                    self.log_priors[j] += move.log_prior_delta
                    m, s = new_m, new_s
                else:
                    move.undo()
            post_var = 1.0 / (1.0 / self.leaf_var + m / sigma2)
            post_mean = post_var * s / sigma2
            values = post_mean + np.sqrt(post_var) * rng.standard_normal(m.size)
            tree.set_leaf_values(values[:, None])
            new_fit = values[ids]
            running = running + (new_fit - self.fits[j])
            self.fits[j] = new_fit
        return running

    def frozen(self) -> list[FrozenTree]:
        return [freeze(t) for t in self.trees]


def _uni_stats(leaf_ids: np.ndarray, n_leaves: int, resid: np.ndarray):
    m = np.bincount(leaf_ids, minlength=n_leaves).astype(float)
    s = np.bincount(leaf_ids, weights=resid, minlength=n_leaves)
    q = np.bincount(leaf_ids, weights=resid * resid, minlength=n_leaves)
    return m, s, q


def _uni_log_marginal(m, s, q, sigma2: float, leaf_var: float) -> float:
    """Log marginal likelihood of leaf residuals with the leaf mean integrated out.

    Sum over leaves of log N(r | 0, sigma2 I + leaf_var J); includes all
    constants so the value matches direct numerical integration.
    """
    denom = sigma2 + m * leaf_var
    terms = (
        -0.5 * m * math.log(2.0 * math.pi * sigma2)
        - 0.5 * np.log(denom / sigma2)
        - 0.5 * (q / sigma2 - leaf_var * s * s / (sigma2 * denom))
    )
    return float(terms.sum())


# -- public operations --------------------------------------------------------


def update_sigma_univariate(residuals: np.ndarray, noise_prior: NoisePrior,
                            rng: np.random.Generator) -> float:
    """Gibbs draw of sigma^2 from the conjugate Gamma posterior on 1/sigma^2."""
    residuals = np.asarray(residuals, dtype=float)
    n = residuals.size
    if n == 0:
        raise ValueError("sigma update needs at least one residual")
    if noise_prior.lam is None:
        raise ValueError("noise prior lambda must be resolved before updating sigma")
    shape = 0.5 * (noise_prior.nu + n)
    rate = 0.5 * (noise_prior.nu * noise_prior.lam + float(residuals @ residuals))
    return 1.0 / sample_gamma(shape, rate, rng)


def fit_bart(y: np.ndarray, X: np.ndarray, config: BartConfig,
             rng: np.random.Generator) -> BartDraws:
    """Backfitting MCMC for the univariate sum-of-trees model.

    ``y`` must already be standardized (mean 0, sd 1); the sampler refuses
    anything else so scale handling stays explicit at the call site.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    check_standardized(y)
    n = y.size
    if n < 2 * config.n_min:
        raise ValueError(f"need at least {2 * config.n_min} rows, got {n}")
    noise = config.noise_prior.resolved(y)
    forest = UnivariateForest(config.num_trees, n, X, config.tree_prior,
                              config.leaf_var, config.n_min)
    sigma2 = 1.0
    kept = config.iterations - config.burn_in
    sigma_draws = np.empty(kept)
    yhat_draws = np.empty((kept, n))
    forests: list[list[FrozenTree]] = []
    running = forest.total_fit()
    for it in range(config.iterations):
        running = forest.sweep(y, running, sigma2, rng)
        running = forest.total_fit()
        sigma2 = update_sigma_univariate(y - running, noise, rng)
        if it >= config.burn_in:
            k = it - config.burn_in
            sigma_draws[k] = math.sqrt(sigma2)
            yhat_draws[k] = running
            forests.append(forest.frozen())
    return BartDraws(sigma_draws, yhat_draws, forests)


class PropensityModel:
    """Probit-link BART fit of P(Z=1 | x) via latent-variable augmentation."""

    def __init__(self, forests: list[list[FrozenTree]], pi_hat: np.ndarray):
        self.forests = forests
        self.pi_hat = pi_hat

    def predict(self, X_new: np.ndarray) -> np.ndarray:
        total = np.zeros(X_new.shape[0])
        for forest in self.forests:
            fit = np.sum(np.stack([t.evaluate(X_new)[:, 0] for t in forest]), axis=0)
            total += ndtr(fit)
        return np.clip(total / len(self.forests), *PROPENSITY_CLIP)


def fit_propensity_model(z: np.ndarray, X: np.ndarray, config: BartConfig,
                         rng: np.random.Generator) -> PropensityModel:
    z = np.asarray(z)
    X = np.asarray(X, dtype=float)
    classes = np.unique(z)
    if not np.isin(classes, (0, 1)).all():
        raise ValueError(f"treatment must be coded 0/1, found values {classes}")
    if classes.size < 2:
        raise OverlapError(
            "treatment indicator is single-class; propensities cannot be bounded away from 0 and 1"
        )
    n = z.size
    treated = z == 1
    forest = UnivariateForest(config.num_trees, n, X, config.tree_prior,
                              config.leaf_var, config.n_min)
    kept = config.iterations - config.burn_in
    prob_sum = np.zeros(n)
    forests: list[list[FrozenTree]] = []
    running = forest.total_fit()
    for it in range(config.iterations):
        # Albert-Chib latents: u ~ N(fit, 1) truncated by the observed class.
        p_neg = ndtr(-running)
        v = rng.random(n)
        u_arg = np.where(treated, p_neg + v * (1.0 - p_neg), v * p_neg)
        latent = running + ndtri(np.clip(u_arg, 1e-12, 1.0 - 1e-12))
        running = forest.sweep(latent, running, 1.0, rng)
        running = forest.total_fit()
        if it >= config.burn_in:
            prob_sum += ndtr(running)
            forests.append(forest.frozen())
    pi_hat = np.clip(prob_sum / kept, *PROPENSITY_CLIP)
    return PropensityModel(forests, pi_hat)


def fit_propensity(z: np.ndarray, X: np.ndarray, config: BartConfig,
                   rng: np.random.Generator) -> np.ndarray:
    """Posterior-mean propensity estimate, clipped inside (0, 1)."""
    return fit_propensity_model(z, X, config, rng).pi_hat


@dataclass
class SLearnerResult:
    """S-learner treatment-effect draws plus the underlying BART fit."""

    tau: np.ndarray          # (S, n), prediction difference Z=1 vs Z=0
    bart: BartDraws
    treatment_column: int    # index of Z in the augmented covariate matrix

    def predict_components(self, X_new: np.ndarray, z_new: np.ndarray):
        """Posterior draws of (mu0, tau, yhat) at new covariates."""
        mu0 = predict_bart(self.bart, _with_treatment(X_new, np.zeros(X_new.shape[0])))
        mu1 = predict_bart(self.bart, _with_treatment(X_new, np.ones(X_new.shape[0])))
        tau = mu1 - mu0
        yhat = np.where(np.asarray(z_new, dtype=float) == 1.0, mu1, mu0)
        return mu0, tau, yhat


def _with_treatment(X: np.ndarray, z: np.ndarray) -> np.ndarray:
    return np.column_stack([X, np.asarray(z, dtype=float)])


def s_learner_tau(y: np.ndarray, X: np.ndarray, z: np.ndarray, config: BartConfig,
                  rng: np.random.Generator) -> SLearnerResult:
    """Fit BART on covariates plus the treatment indicator and difference it out."""
    Xz = _with_treatment(X, z)
    draws = fit_bart(y, Xz, config, rng)
    mu0 = predict_bart(draws, _with_treatment(X, np.zeros(X.shape[0])))
    mu1 = predict_bart(draws, _with_treatment(X, np.ones(X.shape[0])))
    return SLearnerResult(mu1 - mu0, draws, X.shape[1])
