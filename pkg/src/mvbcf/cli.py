"""Command-line interface.

Subcommands: ``simulate``, ``benchmark``, ``fit``, ``ate``, ``moderation``,
``report``.  Every run is reproducible from the config file and the seed; on
failure the command prints a one-line diagnostic, removes any partially
written artifacts, and exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import plots
from .bart import BartConfig
from .causal import CausalConfig
from .pipeline import (
    AnalysisConfig,
    load_all_chains,
    load_csv,
    load_meta,
    fit_analysis,
    model_kwargs,
    moderation_curves,
    read_config,
    render_report,
    save_draws,
    save_meta,
    weighted_ate,
)
from .scalar import ScalarBcfConfig
from .simbench import (
    ALL_METHODS,
    BenchmarkConfig,
    SimSpec,
    gen_synthetic,
    run_benchmark,
    summarize_benchmark,
)


class _Outputs:
    """Tracks files written by one command so failures can clean them up."""

    def __init__(self):
        self.paths: list[Path] = []

    def add(self, path: Path) -> Path:
        self.paths.append(Path(path))
        return path

    def discard_all(self) -> None:
        for path in self.paths:
            try:
                path.unlink(missing_ok=True)
            except OSError:
                pass


def _write_text(path: Path, text: str, outputs: _Outputs) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return outputs.add(path)


def _write_frame(path: Path, frame: pd.DataFrame, outputs: _Outputs) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    return outputs.add(path)


def _sim_spec(raw: dict, seed: int) -> SimSpec:
    section = dict(raw.get("simulation", {}) or {})
    section.pop("seed", None)
    if "snr_band" in section:
        section["snr_band"] = tuple(section["snr_band"])
    return SimSpec(seed=seed, **section)


def _benchmark_config(raw: dict) -> tuple[tuple, BenchmarkConfig]:
    section = dict(raw.get("benchmark", {}) or {})
    methods = tuple(section.get("methods", ALL_METHODS))
    causal = CausalConfig(p=2, **model_kwargs(section.get("causal")))
    bcf = ScalarBcfConfig(**model_kwargs(section.get("bcf")))
    bart = BartConfig(num_trees=70, **model_kwargs(section.get("bart")))
    propensity = BartConfig(num_trees=50, **model_kwargs(section.get("propensity")))
    config = BenchmarkConfig(
        causal=causal, bcf=bcf, bart=bart, propensity=propensity,
        estimate_propensity=bool(section.get("estimate_propensity", True)),
    )
    return methods, config


def _cmd_simulate(args, outputs: _Outputs) -> None:
    raw = read_config(args.config)
    spec = _sim_spec(raw, args.seed)
    rng = np.random.default_rng(spec.seed)
    truth, dataset = gen_synthetic(spec, rng)
    out = Path(args.out)
    frames = {}
    for name, rows in (("train", slice(0, spec.n_train)),
                       ("test", slice(spec.n_train, spec.n_train + spec.n_test))):
        cols = {f"x{j + 1}": dataset.X[rows, j] for j in range(dataset.X.shape[1])}
        cols.update({
            "z1": dataset.Z[rows, 0].astype(int),
            "z2": dataset.Z[rows, 1].astype(int),
            "y1": dataset.Y[rows, 0],
            "y2": dataset.Y[rows, 1],
            "true_mu": truth.mu[rows],
            "true_tau1": truth.tau[rows, 0],
            "true_tau2": truth.tau[rows, 1],
            "true_pi1": truth.propensities[rows, 0],
            "true_pi2": truth.propensities[rows, 1],
        })
        frames[name] = pd.DataFrame(cols)
        _write_frame(out / f"{name}.csv", frames[name], outputs)
    params = {
        "effect_kind": spec.effect_kind,
        "tau_base": truth.tau_base.tolist(),
        "sigma": truth.sigma,
        "snr": None if np.isinf(truth.snr) else truth.snr,
        "seed": spec.seed,
    }
    _write_text(out / "params.json", json.dumps(params, indent=2, sort_keys=True) + "\n",
                outputs)
    print(f"wrote {spec.n_train}+{spec.n_test} rows to {out}")


def _cmd_benchmark(args, outputs: _Outputs) -> None:
    raw = read_config(args.config)
    spec = _sim_spec(raw, args.seed)
    methods, config = _benchmark_config(raw)
    result = run_benchmark(spec, methods=methods, config=config,
                           workers=args.workers, verbose=args.verbose)
    out = Path(args.out)
    _write_frame(out / "benchmark_table.csv", result.table, outputs)
    _write_frame(out / "benchmark_per_rep.csv", result.per_rep, outputs)
    _write_text(out / "benchmark_summary.txt", summarize_benchmark(result), outputs)
    outputs.add(plots.save_benchmark_figure(result.table, out / "benchmark_pehe.png"))
    print(f"benchmark finished: {spec.replications} replication(s), outputs in {out}")


def _cmd_fit(args, outputs: _Outputs) -> None:
    raw = read_config(args.config)
    config = AnalysisConfig.from_dict(raw["analysis"])
    loaded = load_csv(config.data, config)
    chains = fit_analysis(loaded, config, seed=args.seed, workers=args.workers)
    out = Path(args.out)
    for i, draws in enumerate(chains):
        for path in save_draws(draws, out, f"chain{i:03d}",
                               loaded.datasets[0].weights):
            outputs.add(path)
    outputs.add(save_meta(out, loaded, config, n_chains=len(chains), seed=args.seed))
    print(f"fitted {len(chains)} chain(s) on {loaded.n} units; draws in {out}")


def _cmd_ate(args, outputs: _Outputs) -> None:
    meta = load_meta(args.draws)
    pooled = load_all_chains(args.draws)
    report = weighted_ate(pooled, np.asarray(meta["weights"], dtype=float))
    out = Path(args.out)
    names = meta.get("outcome_names") or [f"y{k + 1}" for k in range(len(report.mean))]
    summary = pd.DataFrame({
        "component": np.arange(1, len(report.mean) + 1),
        "outcome": names,
        "ate_mean": report.mean,
        "ci_lower": report.lower,
        "ci_upper": report.upper,
    })
    _write_frame(out / "ate_report.csv", summary, outputs)
    draw_cols = {"draw": np.arange(report.draws.shape[0]), "chain": report.chain_id}
    for k in range(report.draws.shape[1]):
        draw_cols[f"ate_{k + 1}"] = report.draws[:, k]
    _write_frame(out / "ate_draws.csv", pd.DataFrame(draw_cols), outputs)
    print(summary.to_string(index=False))


def _cmd_moderation(args, outputs: _Outputs) -> None:
    raw = read_config(args.config)
    config = AnalysisConfig.from_dict(raw["analysis"])
    loaded = load_csv(config.data, config)
    meta = load_meta(args.draws)
    pooled = load_all_chains(args.draws)
    curve = moderation_curves(
        pooled, loaded.datasets[0].X, args.covariate, loaded.feature_names,
        grid_size=args.grid, max_units=args.units,
        rng=np.random.default_rng(args.seed),
    )
    out = Path(args.out)
    p = curve.pdp.shape[1]
    long = {
        "unit": np.repeat(curve.unit_indices, curve.grid.size),
        "grid_value": np.tile(curve.grid, curve.unit_indices.size),
    }
    for k in range(p):
        long[f"ice_tau_{k + 1}"] = curve.ice[:, :, k].ravel()
    _write_frame(out / f"ice_{args.covariate}.csv", pd.DataFrame(long), outputs)
    pdp_cols = {"grid_value": curve.grid}
    for k in range(p):
        pdp_cols[f"pdp_tau_{k + 1}"] = curve.pdp[:, k]
    _write_frame(out / f"pdp_{args.covariate}.csv", pd.DataFrame(pdp_cols), outputs)
    outputs.add(plots.save_moderation(curve, out / f"moderation_{args.covariate}.png",
                                      meta.get("outcome_names")))
    print(f"moderation curves for '{args.covariate}' written to {out}")


def _cmd_report(args, outputs: _Outputs) -> None:
    meta = load_meta(args.draws)
    pooled = load_all_chains(args.draws)
    report = weighted_ate(pooled, np.asarray(meta["weights"], dtype=float))
    out = Path(args.out)
    text = render_report(report, meta)
    _write_text(out / "report.txt", text, outputs)
    outputs.add(plots.save_ate_density(report, out / "ate_density.png",
                                       meta.get("outcome_names")))
    print(text, end="")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvbcf",
        description="Bayesian tree-ensemble causal inference: simulate, benchmark, fit, report.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, seed_required: bool):
        p.add_argument("--config", required=True, help="YAML config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, required=seed_required,
                       help="random seed" + ("" if seed_required else " (default 0)"),
                       default=None if seed_required else 0)

    p = sub.add_parser("simulate", help="write synthetic train/test CSVs")
    add_common(p, seed_required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("benchmark", help="run the replication benchmark")
    add_common(p, seed_required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_benchmark)

    p = sub.add_parser("fit", help="fit the causal model to a CSV per the config")
    add_common(p, seed_required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("ate", help="summarize persisted draws into an ATE report")
    p.add_argument("--draws", required=True, help="directory with persisted chains")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ate)

    p = sub.add_parser("moderation", help="ICE/PDP curves of the effect vs one covariate")
    p.add_argument("--config", required=True)
    p.add_argument("--draws", required=True)
    p.add_argument("--covariate", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, default=20)
    p.add_argument("--units", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_moderation)

    p = sub.add_parser("report", help="plain-text summary plus ATE density figure")
    p.add_argument("--draws", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    outputs = _Outputs()
    try:
        args.func(args, outputs)
    except Exception as exc:  # noqa: BLE001 - single-line diagnostic contract
        outputs.discard_all()
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
