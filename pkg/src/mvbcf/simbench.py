"""Friedman-based causal simulation, scoring metrics, and the benchmark harness.

Two correlated-outcome datasets are generated from the same nonlinear
prognostic surface with treatment assignment linked to it (in opposite
directions for the two treatments), then the joint sampler and the univariate
baselines are scored out of sample on the prognostic surface, the unit-level
treatment effects, and the observed outcomes.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import pandas as pd

from .bart import BartConfig, fit_propensity_model, s_learner_tau
from .causal import CausalConfig, CausalDataset, fit_causal_model, predict_causal
from .kernels import crps_empirical
from .scalar import ScalarBcfConfig, fit_bcf_scalar_model, predict_bcf_scalar
from .scaling import standardize_outcomes

ALL_METHODS = ("mvbcf", "bcf_per_outcome", "bart_slearner")

# Overlap bounds built into the propensity map used for treatment assignment.
PROPENSITY_FLOOR = 0.1
PROPENSITY_CEIL = 0.9


def friedman(x: np.ndarray) -> np.ndarray | float:
    """The Friedman surface 10*sin(pi*x1*x2) + 20*(x3-0.5)^2 + 10*x4 + 5*x5.

    Accepts a single 10-vector or an (n, 10) matrix; columns beyond the fifth
    are ignored (they act as distractors in the simulation).
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    value = (
        10.0 * np.sin(np.pi * X[:, 0] * X[:, 1])
        + 20.0 * (X[:, 2] - 0.5) ** 2
        + 10.0 * X[:, 3]
        + 5.0 * X[:, 4]
    )
    return float(value[0]) if single else value


@dataclass
class SimSpec:
    """Configuration of one synthetic-benchmark scenario."""

    effect_kind: str = "homogeneous"
    n_train: int = 500
    n_test: int = 500
    replications: int = 1
    snr_band: tuple[float, float] = (1.0, 2.0)
    tau_magnitude_cap: float = 0.3
    tau_floor: float = 0.05
    noise_sd: Optional[float] = None  # override; 0 gives a noise-free fixture
    seed: int = 0

    def __post_init__(self):
        if self.effect_kind not in ("homogeneous", "heterogeneous"):
            raise ValueError(f"unknown effect kind {self.effect_kind!r}")
        lo, hi = self.snr_band
        if not (1.0 <= lo < hi <= 2.0):
            raise ValueError(f"snr_band must sit inside [1, 2], got {self.snr_band}")
        if not 0.0 < self.tau_floor < self.tau_magnitude_cap:
            raise ValueError("tau_floor must lie in (0, tau_magnitude_cap)")
        if min(self.n_train, self.n_test, self.replications) < 1:
            raise ValueError("n_train, n_test and replications must be positive")


@dataclass
class SyntheticTruth:
    """Generating quantities for one replication (train and test stacked)."""

    mu: np.ndarray            # (n,)
    tau: np.ndarray           # (n, 2) per-unit effects
    Z: np.ndarray             # (n, 2)
    y: np.ndarray             # (n, 2)
    propensities: np.ndarray  # (n, 2)
    tau_base: np.ndarray      # (2,) generating effect sizes
    sigma: float
    snr: float


def gen_synthetic(spec: SimSpec, rng: np.random.Generator):
    """Draw one synthetic dataset; returns ``(truth, dataset)``.

    Treatment one is assigned with probability increasing in the prognostic
    surface and treatment two decreasing in it, both clamped to [0.1, 0.9] so
    overlap holds by construction.  Noise is isotropic with the signal-to-noise
    ratio (sd of the surface over noise sd) uniform on the configured band.
    """
    n = spec.n_train + spec.n_test
    X = rng.random((n, 10))
    mu = friedman(X)
    spread = mu.max() - mu.min()
    t = (mu - mu.min()) / spread
    span = PROPENSITY_CEIL - PROPENSITY_FLOOR
    propensities = np.column_stack([
        PROPENSITY_FLOOR + span * t,
        PROPENSITY_FLOOR + span * (1.0 - t),
    ])
    Z = (rng.random((n, 2)) < propensities).astype(float)
    if spec.noise_sd is not None:
        sigma = float(spec.noise_sd)
        snr = math.inf if sigma == 0.0 else float(mu.std() / sigma)
    else:
        snr = float(rng.uniform(*spec.snr_band))
        sigma = float(mu.std() / snr)
    sd_y = math.sqrt(mu.var() + sigma * sigma)
    magnitude = rng.uniform(spec.tau_floor, spec.tau_magnitude_cap, size=2) * sd_y
    signs = np.where(rng.random(2) < 0.5, -1.0, 1.0)
    tau_base = magnitude * signs
    if spec.effect_kind == "homogeneous":
        tau = np.tile(tau_base, (n, 1))
    else:
        moderation = np.column_stack([
            (1.0 + X[:, 5] + X[:, 6]) / 2.0,
            (2.0 + X[:, 6]) / 3.0,
        ])
        tau = moderation * tau_base
    eps = sigma * rng.standard_normal((n, 2))
    y = mu[:, None] + tau * Z + eps
    truth = SyntheticTruth(mu, tau, Z, y, propensities, tau_base, sigma, snr)
    dataset = CausalDataset(X, y, Z, pi_hat=propensities[:, 0])
    return truth, dataset


# -- metrics -------------------------------------------------------------------


def pehe(tau_true: np.ndarray, tau_hat: np.ndarray) -> float:
    """Root mean squared error of unit-level treatment-effect estimates."""
    tau_true = np.asarray(tau_true, dtype=float)
    tau_hat = np.asarray(tau_hat, dtype=float)
    if tau_true.shape != tau_hat.shape:
        raise ValueError(f"shape mismatch: {tau_true.shape} vs {tau_hat.shape}")
    if tau_true.size == 0:
        raise ValueError("pehe needs at least one unit")
    return float(np.sqrt(np.mean((tau_true - tau_hat) ** 2)))


def rmse(true: np.ndarray, estimate: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(true) - np.asarray(estimate)) ** 2)))


@dataclass
class IntervalMetrics:
    coverage: float
    width: float


def interval_metrics(draws: np.ndarray, truth: np.ndarray,
                     level: float = 0.95) -> IntervalMetrics:
    """Equal-tailed credible-interval coverage and mean width across units.

    ``draws`` is (S, n) with S >= 20 posterior draws per unit.
    """
    draws = np.asarray(draws, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if draws.ndim != 2 or draws.shape[0] < 20:
        raise ValueError("interval_metrics needs at least 20 draws per unit")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(draws, [alpha, 1.0 - alpha], axis=0)
    coverage = float(np.mean((truth >= lo) & (truth <= hi)))
    width = float(np.mean(hi - lo))
    return IntervalMetrics(coverage, width)


def mean_crps(draws: np.ndarray, truth: np.ndarray) -> float:
    """Per-unit empirical CRPS averaged across units (draws: (S, n))."""
    return float(np.mean([
        crps_empirical(draws[:, i], truth[i]) for i in range(draws.shape[1])
    ]))


METRIC_NAMES = (
    "rmse_mu", "pehe_tau", "rmse_y",
    "crps_mu", "crps_tau", "crps_y",
    "coverage_mu", "width_mu",
    "coverage_tau", "width_tau",
    "coverage_y", "width_y",
)


@dataclass
class BenchmarkRow:
    """Scores of one method on one outcome component in one replication."""

    method: str
    outcome: int  # 1-based component index
    replication: int
    rmse_mu: float
    pehe_tau: float
    rmse_y: float
    crps_mu: float
    crps_tau: float
    crps_y: float
    coverage_mu: float
    width_mu: float
    coverage_tau: float
    width_tau: float
    coverage_y: float
    width_y: float


def _score(method: str, outcome: int, replication: int,
           mu_draws, tau_draws, y_draws, mu_true, tau_true, y_obs) -> BenchmarkRow:
    im_mu = interval_metrics(mu_draws, mu_true)
    im_tau = interval_metrics(tau_draws, tau_true)
    im_y = interval_metrics(y_draws, y_obs)
    return BenchmarkRow(
        method=method, outcome=outcome, replication=replication,
        rmse_mu=rmse(mu_true, mu_draws.mean(axis=0)),
        pehe_tau=pehe(tau_true, tau_draws.mean(axis=0)),
        rmse_y=rmse(y_obs, y_draws.mean(axis=0)),
        crps_mu=mean_crps(mu_draws, mu_true),
        crps_tau=mean_crps(tau_draws, tau_true),
        crps_y=mean_crps(y_draws, y_obs),
        coverage_mu=im_mu.coverage, width_mu=im_mu.width,
        coverage_tau=im_tau.coverage, width_tau=im_tau.width,
        coverage_y=im_y.coverage, width_y=im_y.width,
    )


# -- the harness ----------------------------------------------------------------


@dataclass
class BenchmarkConfig:
    """Model settings used for every replication of the benchmark."""

    causal: CausalConfig = field(default_factory=lambda: CausalConfig(p=2))
    bcf: ScalarBcfConfig = field(default_factory=ScalarBcfConfig)
    bart: BartConfig = field(default_factory=lambda: BartConfig(num_trees=70))
    propensity: BartConfig = field(default_factory=lambda: BartConfig(num_trees=50))
    estimate_propensity: bool = True


@dataclass
class BenchmarkResult:
    table: pd.DataFrame     # aggregated long table: method, outcome, metric, value, replications
    per_rep: pd.DataFrame   # one row per (method, outcome, replication)
    failures: dict


def _replication_rows(spec: SimSpec, methods: tuple, config: BenchmarkConfig,
                      rep: int, seed_seq: np.random.SeedSequence):
    streams = seed_seq.spawn(8)
    rng_data = np.random.default_rng(streams[0])
    truth, dataset = gen_synthetic(spec, rng_data)
    tr = slice(0, spec.n_train)
    te = slice(spec.n_train, spec.n_train + spec.n_test)
    X_tr, X_te = dataset.X[tr], dataset.X[te]
    Y_tr, y_te = dataset.Y[tr], dataset.Y[te]
    Z_tr, Z_te = dataset.Z[tr], dataset.Z[te]
    mu_true_te = truth.mu[te]
    tau_true_te = truth.tau[te]

    # Propensity per treatment, estimated on the training split only.
    pi_tr = np.empty((spec.n_train, 2))
    pi_te = np.empty((spec.n_test, 2))
    if config.estimate_propensity:
        for k in range(2):
            model = fit_propensity_model(Z_tr[:, k], X_tr, config.propensity,
                                         np.random.default_rng(streams[1 + k]))
            pi_tr[:, k] = model.pi_hat
            pi_te[:, k] = model.predict(X_te)
    else:
        pi_tr[:] = truth.propensities[tr]
        pi_te[:] = truth.propensities[te]

    rows, failures = [], []

    if "mvbcf" in methods:
        try:
            ds = CausalDataset(X_tr, Y_tr, Z_tr, pi_hat=pi_tr[:, 0])
            draws = fit_causal_model(ds, config.causal, np.random.default_rng(streams[3]))
            mu, tau, yhat = predict_causal(draws, X_te, Z_te, pi_new=pi_te[:, 0])
            for k in range(2):
                rows.append(_score("mvbcf", k + 1, rep,
                                   mu[:, :, k], tau[:, :, k], yhat[:, :, k],
                                   mu_true_te, tau_true_te[:, k], y_te[:, k]))
        except Exception as exc:  # noqa: BLE001 - resilience is part of the contract
            failures.append(("mvbcf", rep, repr(exc)))

    if "bcf_per_outcome" in methods:
        for k in range(2):
            try:
                draws = fit_bcf_scalar_model(
                    Y_tr[:, k], X_tr, Z_tr[:, k], pi_tr[:, k], config.bcf,
                    np.random.default_rng(streams[4 + k]))
                mu, tau, yhat = predict_bcf_scalar(draws, X_te, Z_te[:, k], pi_new=pi_te[:, k])
                rows.append(_score("bcf_per_outcome", k + 1, rep,
                                   mu, tau, yhat,
                                   mu_true_te, tau_true_te[:, k], y_te[:, k]))
            except Exception as exc:  # noqa: BLE001
                failures.append((f"bcf_per_outcome[y{k + 1}]", rep, repr(exc)))

    if "bart_slearner" in methods:
        for k in range(2):
            try:
                y_std, fit_scale = standardize_outcomes(Y_tr[:, k])
                result = s_learner_tau(y_std[:, 0], X_tr, Z_tr[:, k], config.bart,
                                       np.random.default_rng(streams[6 + k]))
                mu0, tau, yhat = result.predict_components(X_te, Z_te[:, k])
                center, scale = float(fit_scale.center[0]), float(fit_scale.scale[0])
                rows.append(_score("bart_slearner", k + 1, rep,
                                   mu0 * scale + center, tau * scale,
                                   yhat * scale + center,
                                   mu_true_te, tau_true_te[:, k], y_te[:, k]))
            except Exception as exc:  # noqa: BLE001
                failures.append((f"bart_slearner[y{k + 1}]", rep, repr(exc)))

    return rows, failures


def run_benchmark(spec: SimSpec, methods: tuple = ALL_METHODS,
                  config: Optional[BenchmarkConfig] = None,
                  workers: int = 1, verbose: bool = False) -> BenchmarkResult:
    """Run the replication study and aggregate scores per method and outcome.

    Replications are independent; ``workers > 1`` distributes them over
    processes without changing any result (every replication owns a seed
    stream spawned deterministically from ``spec.seed``).  A failed fit is
    logged and excluded rather than aborting the run.
    """
    unknown = set(methods) - set(ALL_METHODS)
    if unknown:
        raise ValueError(f"unknown methods: {sorted(unknown)}")
    if config is None:
        config = BenchmarkConfig()
    children = np.random.SeedSequence(spec.seed).spawn(spec.replications)
    jobs = [(spec, tuple(methods), config, rep, children[rep])
            for rep in range(spec.replications)]
    all_rows: list[BenchmarkRow] = []
    all_failures: list[tuple] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rep, (rows, failures) in enumerate(pool.map(_replication_worker, jobs)):
                all_rows.extend(rows)
                all_failures.extend(failures)
                if verbose:
                    print(f"replication {rep + 1}/{spec.replications} done")
    else:
        for job in jobs:
            rows, failures = _replication_rows(*job)
            all_rows.extend(rows)
            all_failures.extend(failures)
            if verbose:
                print(f"replication {job[3] + 1}/{spec.replications} done")

    per_rep = pd.DataFrame([asdict(r) for r in all_rows])
    records = []
    for (method, outcome), group in per_rep.groupby(["method", "outcome"], sort=True):
        for metric in METRIC_NAMES:
            records.append({
                "method": method,
                "outcome": int(outcome),
                "metric": metric,
                "value": float(group[metric].mean()),
                "replications": int(len(group)),
            })
    table = pd.DataFrame.from_records(records)
    failures = {}
    for method, rep, message in all_failures:
        failures.setdefault(method, []).append((rep, message))
    return BenchmarkResult(table=table, per_rep=per_rep, failures=failures)


def _replication_worker(job):
    return _replication_rows(*job)


def summarize_benchmark(result: BenchmarkResult) -> str:
    """Text summary: metrics as rows, (method, outcome) pairs as columns."""
    table = result.table
    pivot = table.pivot_table(index="metric", columns=["method", "outcome"],
                              values="value")
    pivot = pivot.reindex(METRIC_NAMES)
    lines = ["Benchmark summary (mean over replications)", ""]
    lines.append(pivot.round(4).to_string())
    reps = table["replications"].max() if len(table) else 0
    lines.append("")
    lines.append(f"replications scored: {reps}")
    if result.failures:
        for method, items in sorted(result.failures.items()):
            lines.append(f"failures[{method}]: {len(items)}")
    else:
        lines.append("failures: none")
    return "\n".join(lines) + "\n"
