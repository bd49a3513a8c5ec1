"""Applied-analysis layer: CSV ingestion, fitting, pooling, ATE, moderation.

Outcome groups map to plausible values: each group is one set of ``p`` outcome
columns, fitted with its own chain(s) on otherwise identical data, and the
chains are pooled after burn-in.  Everything downstream (ATE reports,
moderation curves, persistence) consumes pooled :class:`CausalDraws`.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import yaml

from .bart import BartConfig, NoisePrior, fit_propensity_model
from .causal import CausalConfig, CausalDataset, CausalDraws, fit_causal_model, replay_tau
from .errors import SchemaError
from .trees import FrozenTree, TreePriorConfig, freeze, tree_from_dict, tree_to_dict


def model_kwargs(section: Optional[dict]) -> dict:
    """Convert nested config mappings into the dataclasses they configure."""
    out = {}
    for key, value in (section or {}).items():
        if key.endswith("tree_prior") and isinstance(value, dict):
            out[key] = TreePriorConfig(**value)
        elif key == "noise_prior" and isinstance(value, dict):
            out[key] = NoisePrior(**value)
        else:
            out[key] = value
    return out


@dataclass
class PropensitySettings:
    source: str = "estimate"          # "estimate" or "column"
    column: Optional[str] = None
    num_trees: int = 50
    iterations: int = 1000
    burn_in: int = 500

    def __post_init__(self):
        if self.source not in ("estimate", "column"):
            raise ValueError(f"propensity source must be 'estimate' or 'column', got {self.source!r}")
        if self.source == "column" and not self.column:
            raise ValueError("propensity source 'column' needs a column name")

    def bart_config(self) -> BartConfig:
        return BartConfig(num_trees=self.num_trees, iterations=self.iterations,
                          burn_in=self.burn_in)


@dataclass
class AnalysisConfig:
    """Everything needed to fit one dataset end to end."""

    data: str
    outcome_groups: list[list[str]]
    treatment: list[str]
    covariates_numeric: list[str] = field(default_factory=list)
    covariates_categorical: list[str] = field(default_factory=list)
    weight_column: Optional[str] = None
    propensity: PropensitySettings = field(default_factory=PropensitySettings)
    model: dict = field(default_factory=dict)  # CausalConfig overrides
    chains_per_value: int = 1

    def __post_init__(self):
        if not self.outcome_groups:
            raise ValueError("at least one outcome group is required")
        p = len(self.outcome_groups[0])
        if p < 1 or any(len(g) != p for g in self.outcome_groups):
            raise ValueError("all outcome groups must list the same number of columns")
        if len(self.treatment) not in (1, p):
            raise ValueError(f"treatment must list 1 or {p} columns")
        if not self.covariates_numeric and not self.covariates_categorical:
            raise ValueError("at least one covariate is required")

    @property
    def p(self) -> int:
        return len(self.outcome_groups[0])

    def causal_config(self) -> CausalConfig:
        return CausalConfig(p=self.p, **model_kwargs(self.model))

    @classmethod
    def from_dict(cls, raw: dict) -> "AnalysisConfig":
        cov = raw.get("covariates", {}) or {}
        prop = raw.get("propensity", {}) or {}
        return cls(
            data=raw["data"],
            outcome_groups=[list(g) for g in raw["outcomes"]],
            treatment=list(raw["treatment"]),
            covariates_numeric=list(cov.get("numeric", []) or []),
            covariates_categorical=list(cov.get("categorical", []) or []),
            weight_column=raw.get("weight"),
            propensity=PropensitySettings(**prop),
            model=dict(raw.get("model", {}) or {}),
            chains_per_value=int(raw.get("chains_per_value", 1)),
        )


def read_config(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise SchemaError(f"config file {path} did not parse to a mapping")
    return raw


# -- CSV ingestion --------------------------------------------------------------


@dataclass
class LoadedData:
    """Parsed analysis inputs; one dataset per outcome group, sharing X/Z/weights."""

    datasets: list[CausalDataset]
    feature_names: list[str]
    outcome_groups: list[list[str]]
    n_dropped: int
    pi_column: Optional[np.ndarray]

    @property
    def n(self) -> int:
        return self.datasets[0].n

    @property
    def p(self) -> int:
        return self.datasets[0].p

    def treated_counts(self) -> np.ndarray:
        return self.datasets[0].Z.sum(axis=0).astype(int)


def _numeric_column(frame: pd.DataFrame, name: str) -> pd.Series:
    series = frame[name]
    coerced = pd.to_numeric(series, errors="coerce")
    garbled = coerced.isna() & series.notna()
    if series.dtype == object:
        # Whitespace-only cells count as missing, not as parse errors.
        garbled &= series.astype(str).str.strip().ne("")
    if garbled.any():
        row = int(np.flatnonzero(garbled.to_numpy())[0])
        raise SchemaError(
            f"non-numeric value {series.iloc[row]!r} in numeric column '{name}' "
            f"(data row {row + 1})"
        )
    return coerced


def load_csv(path: str | Path, config: AnalysisConfig) -> LoadedData:
    """Parse the delimited input into one :class:`CausalDataset` per outcome group.

    Categorical covariates become one indicator column per level (with an
    explicit ``missing`` level); numeric covariates get median imputation plus
    a missingness indicator.  Rows missing a treatment or any outcome value
    are dropped, with the count reported on the returned object.
    """
    frame = pd.read_csv(path)
    needed = (
        [c for group in config.outcome_groups for c in group]
        + config.treatment + config.covariates_numeric + config.covariates_categorical
    )
    if config.weight_column:
        needed.append(config.weight_column)
    if config.propensity.source == "column":
        needed.append(config.propensity.column)
    missing = [c for c in needed if c not in frame.columns]
    if missing:
        raise SchemaError(f"column(s) not found in {path}: {missing}")

    outcome_cols = {c: _numeric_column(frame, c) for group in config.outcome_groups for c in group}
    treat_cols = {c: _numeric_column(frame, c) for c in config.treatment}
    keep = np.ones(len(frame), dtype=bool)
    for col in outcome_cols.values():
        keep &= col.notna().to_numpy()
    for col in treat_cols.values():
        keep &= col.notna().to_numpy()
    n_dropped = int((~keep).sum())
    frame = frame.loc[keep].reset_index(drop=True)

    features = []
    names: list[str] = []
    for name in config.covariates_numeric:
        col = _numeric_column(frame, name)
        gaps = col.isna()
        if gaps.any():
            med = float(col.median())
            features.append(col.fillna(med).to_numpy(dtype=float))
            names.append(name)
            features.append(gaps.to_numpy(dtype=float))
            names.append(f"{name}__missing")
        else:
            features.append(col.to_numpy(dtype=float))
            names.append(name)
    for name in config.covariates_categorical:
        col = frame[name].astype("string").fillna("missing")
        for level in sorted(col.unique()):
            features.append((col == level).to_numpy(dtype=float))
            names.append(f"{name}={level}")
    X = np.column_stack(features)

    Z_cols = [treat_cols[c].loc[keep].reset_index(drop=True).to_numpy(dtype=float)
              for c in config.treatment]
    Z = np.column_stack(Z_cols)
    if not np.isin(Z, (0.0, 1.0)).all():
        raise SchemaError("treatment column(s) must contain only 0/1 values")
    if Z.shape[1] == 1 and config.p > 1:
        Z = np.repeat(Z, config.p, axis=1)

    if config.weight_column:
        wcol = _numeric_column(frame, config.weight_column)
        if wcol.isna().any():
            row = int(np.flatnonzero(wcol.isna().to_numpy())[0])
            raise SchemaError(f"missing weight in column '{config.weight_column}' (data row {row + 1})")
        weights = wcol.to_numpy(dtype=float)
        if np.any(weights <= 0):
            raise SchemaError("survey weights must be strictly positive")
    else:
        weights = np.ones(len(frame))

    pi_column = None
    if config.propensity.source == "column":
        pcol = _numeric_column(frame, config.propensity.column).to_numpy(dtype=float)
        if np.any(~np.isfinite(pcol)) or np.any(pcol <= 0) or np.any(pcol >= 1):
            raise SchemaError("propensity column values must lie strictly inside (0, 1)")
        pi_column = pcol

    datasets = []
    for group in config.outcome_groups:
        Y = np.column_stack([
            outcome_cols[c].loc[keep].reset_index(drop=True).to_numpy(dtype=float)
            for c in group
        ])
        datasets.append(CausalDataset(X, Y, Z, pi_hat=pi_column, weights=weights))
    return LoadedData(datasets, names, config.outcome_groups, n_dropped, pi_column)


# -- fitting and pooling ---------------------------------------------------------


def _fit_chain(args):
    dataset, causal_config, seed_seq, chain_id = args
    rng = np.random.default_rng(seed_seq)
    return fit_causal_model(dataset, causal_config, rng, chain_id=chain_id)


def fit_analysis(loaded: LoadedData, config: AnalysisConfig, seed: int,
                 workers: int = 1) -> list[CausalDraws]:
    """Fit every plausible-value chain; returns one draws object per chain.

    The propensity model depends only on (Z, X), so it is estimated once and
    shared across groups and chains.  Chain seeds are spawned deterministically
    from ``seed``, so the worker count never changes the results.
    """
    root = np.random.SeedSequence(seed)
    n_chains = len(loaded.datasets) * config.chains_per_value
    streams = root.spawn(n_chains + 1)
    datasets = loaded.datasets
    if config.propensity.source == "estimate":
        rng = np.random.default_rng(streams[0])
        model = fit_propensity_model(datasets[0].Z[:, 0], datasets[0].X,
                                     config.propensity.bart_config(), rng)
        datasets = [
            CausalDataset(d.X, d.Y, d.Z, pi_hat=model.pi_hat, weights=d.weights)
            for d in datasets
        ]
    causal_config = config.causal_config()
    jobs = []
    chain = 0
    for dataset in datasets:
        for _ in range(config.chains_per_value):
            jobs.append((dataset, causal_config, streams[1 + chain], chain))
            chain += 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_fit_chain, jobs))
    return [_fit_chain(job) for job in jobs]


def pool_chains(chains: list[CausalDraws]) -> CausalDraws:
    """Concatenate kept draws across chains, retaining per-draw provenance."""
    if not chains:
        raise ValueError("no chains to pool")
    if len(chains) == 1:
        return chains[0]
    first = chains[0]
    for other in chains[1:]:
        if other.tau.shape[1:] != first.tau.shape[1:]:
            raise SchemaError(
                f"cannot pool chains with shapes {first.tau.shape[1:]} and {other.tau.shape[1:]}"
            )
        if (other.mu_covariates != first.mu_covariates
                or other.tau_covariates != first.tau_covariates
                or other.include_propensity != first.include_propensity):
            raise SchemaError("cannot pool chains fitted with different covariate schemas")

    def cat(attr):
        parts = [getattr(c, attr) for c in chains]
        if any(part is None for part in parts):
            return None
        return np.concatenate(parts, axis=0)

    return CausalDraws(
        mu=cat("mu"), tau=cat("tau"), yhat=cat("yhat"), sigma=cat("sigma"),
        mu_forests=[f for c in chains for f in c.mu_forests],
        tau_forests=[f for c in chains for f in c.tau_forests],
        chain_id=np.concatenate([c.chain_id for c in chains]),
        out_center=np.concatenate([c.out_center for c in chains], axis=0),
        out_scale=np.concatenate([c.out_scale for c in chains], axis=0),
        mu_covariates=first.mu_covariates,
        tau_covariates=first.tau_covariates,
        include_propensity=first.include_propensity,
    )


# -- weighted ATE and moderation --------------------------------------------------


@dataclass
class AteReport:
    """Posterior summary of the survey-weighted average treatment effect."""

    mean: np.ndarray      # (p,)
    lower: np.ndarray     # (p,)
    upper: np.ndarray     # (p,)
    draws: np.ndarray     # (S, p) pooled ATE draws (the joint pairs for plotting)
    chain_id: np.ndarray  # (S,)


def weighted_ate(draws: CausalDraws, weights: np.ndarray,
                 level: float = 0.95) -> AteReport:
    """Hajek-style weighted mean of per-unit effects, one ATE draw per iteration."""
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 1 or weights.shape[0] != draws.tau.shape[1]:
        raise ValueError("weights must be a vector with one entry per unit")
    if np.any(weights <= 0):
        raise ValueError("weights must be strictly positive")
    ate_draws = draws.ate(weights)
    alpha = (1.0 - level) / 2.0
    lower, upper = np.quantile(ate_draws, [alpha, 1.0 - alpha], axis=0)
    return AteReport(ate_draws.mean(axis=0), lower, upper, ate_draws, draws.chain_id)


@dataclass
class ModerationCurve:
    """ICE curves and their pointwise mean (the PDP) for one covariate."""

    covariate: str
    grid: np.ndarray          # (G,)
    ice: np.ndarray           # (U, G, p) posterior-mean effect per unit
    pdp: np.ndarray           # (G, p)
    unit_indices: np.ndarray  # (U,)


def moderation_curves(draws: CausalDraws, X: np.ndarray, covariate: str,
                      feature_names: list[str], grid_size: int = 20,
                      max_units: int = 100,
                      rng: Optional[np.random.Generator] = None) -> ModerationCurve:
    """Replay the treatment ensembles along a grid of one covariate.

    Each retained unit's covariate is swept over ``grid_size`` evenly spaced
    values spanning its observed range; the posterior-mean effect traces the
    ICE curve, and the PDP is the pointwise mean over units.  Units are
    subsampled to ``max_units`` to keep plots readable.
    """
    if covariate not in feature_names:
        raise SchemaError(f"unknown covariate '{covariate}'")
    col = feature_names.index(covariate)
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if max_units is not None and max_units < n:
        rng = rng or np.random.default_rng(0)
        units = np.sort(rng.choice(n, size=max_units, replace=False))
    else:
        units = np.arange(n)
    lo, hi = X[:, col].min(), X[:, col].max()
    grid = np.linspace(lo, hi, grid_size)
    X_units = X[units]
    ice = np.empty((units.size, grid_size, draws.p))
    for g, value in enumerate(grid):
        X_mod = X_units.copy()
        X_mod[:, col] = value
        ice[:, g, :] = replay_tau(draws, X_mod).mean(axis=0)
    return ModerationCurve(covariate, grid, ice, ice.mean(axis=0), units)


# -- persistence -------------------------------------------------------------------


def save_draws(draws: CausalDraws, outdir: str | Path, stem: str,
               weights: np.ndarray) -> list[Path]:
    """Write one chain's draws: sigma/ATE table, per-unit effects, ensembles.

    Layout (documented in the README): ``{stem}_draws.csv`` has one row per
    kept iteration with the residual covariance entries row-major and the
    weighted ATE per component; ``{stem}_tau.csv`` is the long-format
    companion with per-unit effect rows; ``{stem}_trees.jsonl`` carries the
    serialized ensembles plus the output scaling per iteration.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    S, n, p = draws.tau.shape
    ate = draws.ate(weights)
    main = {"iteration": np.arange(S), "chain": draws.chain_id}
    for a in range(p):
        for b in range(p):
            main[f"sigma_{a + 1}{b + 1}"] = draws.sigma[:, a, b]
    for k in range(p):
        main[f"ate_{k + 1}"] = ate[:, k]
    draws_path = outdir / f"{stem}_draws.csv"
    pd.DataFrame(main).to_csv(draws_path, index=False)

    tau_flat = {
        "iteration": np.repeat(np.arange(S), n),
        "chain": np.repeat(draws.chain_id, n),
        "unit": np.tile(np.arange(n), S),
    }
    for k in range(p):
        tau_flat[f"tau_{k + 1}"] = draws.tau[:, :, k].ravel()
    tau_path = outdir / f"{stem}_tau.csv"
    pd.DataFrame(tau_flat).to_csv(tau_path, index=False)

    trees_path = outdir / f"{stem}_trees.jsonl"
    with open(trees_path, "w", encoding="utf-8") as fh:
        for s in range(S):
            record = {
                "iteration": s,
                "chain": int(draws.chain_id[s]),
                "out_center": draws.out_center[s].tolist(),
                "out_scale": draws.out_scale[s].tolist(),
                "mu_trees": [tree_to_dict(t) for t in draws.mu_forests[s]],
                "tau_trees": [tree_to_dict(t) for t in draws.tau_forests[s]],
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")
    return [draws_path, tau_path, trees_path]


def save_meta(outdir: str | Path, loaded: LoadedData, config: AnalysisConfig,
              n_chains: int, seed: int) -> Path:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    meta = {
        "n": loaded.n,
        "p": loaded.p,
        "n_dropped": loaded.n_dropped,
        "outcome_groups": loaded.outcome_groups,
        "outcome_names": loaded.outcome_groups[0],
        "feature_names": loaded.feature_names,
        "weights": loaded.datasets[0].weights.tolist(),
        "treated_counts": loaded.treated_counts().tolist(),
        "treatment": config.treatment,
        "chains": n_chains,
        "seed": seed,
        "mu_covariates": None,
        "tau_covariates": None,
        "include_propensity": bool(config.causal_config().include_propensity),
    }
    path = outdir / "meta.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return path


def load_meta(outdir: str | Path) -> dict:
    with open(Path(outdir) / "meta.json", "r", encoding="utf-8") as fh:
        return json.load(fh)


def load_draws(outdir: str | Path, stem: str) -> CausalDraws:
    """Reload one chain saved by :func:`save_draws`.

    ``mu``/``yhat`` are not part of the persisted layout, so the returned
    object carries effects, covariances, ensembles, and provenance only.
    """
    outdir = Path(outdir)
    main = pd.read_csv(outdir / f"{stem}_draws.csv")
    tau_long = pd.read_csv(outdir / f"{stem}_tau.csv")
    tau_cols = [c for c in tau_long.columns if c.startswith("tau_")]
    p = len(tau_cols)
    S = len(main)
    n = int(tau_long["unit"].max()) + 1
    tau = np.empty((S, n, p))
    for k, c in enumerate(tau_cols):
        tau[:, :, k] = tau_long[c].to_numpy().reshape(S, n)
    sigma = np.empty((S, p, p))
    for a in range(p):
        for b in range(p):
            sigma[:, a, b] = main[f"sigma_{a + 1}{b + 1}"].to_numpy()
    mu_forests: list[list[FrozenTree]] = []
    tau_forests: list[list[FrozenTree]] = []
    out_center = np.empty((S, p))
    out_scale = np.empty((S, p))
    with open(outdir / f"{stem}_trees.jsonl", "r", encoding="utf-8") as fh:
        for s, line in enumerate(fh):
            record = json.loads(line)
            out_center[s] = record["out_center"]
            out_scale[s] = record["out_scale"]
            mu_forests.append([freeze(tree_from_dict(d)) for d in record["mu_trees"]])
            tau_forests.append([freeze(tree_from_dict(d)) for d in record["tau_trees"]])
    meta = load_meta(outdir)
    return CausalDraws(
        mu=None, tau=tau, yhat=None, sigma=sigma,
        mu_forests=mu_forests, tau_forests=tau_forests,
        chain_id=main["chain"].to_numpy(),
        out_center=out_center, out_scale=out_scale,
        mu_covariates=meta.get("mu_covariates"),
        tau_covariates=meta.get("tau_covariates"),
        include_propensity=meta.get("include_propensity", True),
    )


def load_all_chains(outdir: str | Path) -> CausalDraws:
    meta = load_meta(outdir)
    chains = [load_draws(outdir, f"chain{c:03d}") for c in range(meta["chains"])]
    return pool_chains(chains)


# -- report text --------------------------------------------------------------------


def format_group_size(count: int, total: int) -> str:
    return f"{count} ({100.0 * count / total:.0f}%)"


def render_report(report: AteReport, meta: dict) -> str:
    """Plain-text summary: group sizes plus per-component ATE and interval."""
    n = meta["n"]
    names = meta.get("outcome_names") or [f"y{k + 1}" for k in range(len(report.mean))]
    lines = ["Treatment effect report", "=" * 23, ""]
    lines.append(f"units analysed: {n} (rows dropped at load: {meta.get('n_dropped', 0)})")
    lines.append(f"pooled draws: {report.draws.shape[0]} across {meta.get('chains', 1)} chain(s)")
    lines.append("")
    counts = meta.get("treated_counts", [])
    treatments = meta.get("treatment", [])
    if len(set(counts)) <= 1 and counts:
        label = treatments[0] if treatments else "treatment"
        treated = counts[0]
        lines.append(f"treatment group size [{label}]: {format_group_size(treated, n)}")
        lines.append(f"control group size   [{label}]: {format_group_size(n - treated, n)}")
    else:
        for k, treated in enumerate(counts):
            label = treatments[k] if k < len(treatments) else f"component {k + 1}"
            lines.append(f"treatment group size [{label}]: {format_group_size(treated, n)}")
            lines.append(f"control group size   [{label}]: {format_group_size(n - treated, n)}")
    lines.append("")
    for k, name in enumerate(names):
        lines.append(
            f"{name}: ATE {report.mean[k]:.3f}, "
            f"95% CI ({report.lower[k]:.3f}, {report.upper[k]:.3f})"
        )
    return "\n".join(lines) + "\n"
