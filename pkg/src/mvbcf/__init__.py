"""Bayesian tree-ensemble causal inference.

Univariate BART (including a probit propensity model and an S-learner),
univariate Bayesian Causal Forests, and the shared-tree multivariate BCF
sampler, together with a Friedman-style simulation benchmark and a generic
CSV analysis pipeline.
"""

from .bart import (
    BartConfig,
    BartDraws,
    fit_bart,
    fit_propensity,
    s_learner_tau,
    update_sigma_univariate,
)
from .causal import (
    CausalConfig,
    CausalDataset,
    CausalDraws,
    fit_causal,
    fit_causal_model,
    predict_causal,
)
from .kernels import crps_empirical, sample_gamma, sample_inv_wishart, sample_mvn
from .scalar import ScalarBcfConfig, fit_bcf_scalar, fit_bcf_scalar_model
from .simbench import SimSpec, friedman, gen_synthetic, interval_metrics, pehe, run_benchmark
from .trees import Tree, TreePriorConfig, evaluate, log_tree_prior, partition, propose_move

__all__ = [
    "BartConfig",
    "BartDraws",
    "CausalConfig",
    "CausalDataset",
    "CausalDraws",
    "ScalarBcfConfig",
    "SimSpec",
    "Tree",
    "TreePriorConfig",
    "crps_empirical",
    "evaluate",
    "fit_bart",
    "fit_bcf_scalar",
    "fit_bcf_scalar_model",
    "fit_causal",
    "fit_causal_model",
    "fit_propensity",
    "friedman",
    "gen_synthetic",
    "interval_metrics",
    "log_tree_prior",
    "partition",
    "pehe",
    "predict_causal",
    "propose_move",
    "run_benchmark",
    "s_learner_tau",
    "sample_gamma",
    "sample_inv_wishart",
    "sample_mvn",
    "update_sigma_univariate",
]
