"""Command-line interface.

Subcommands: ``fit`` (full pipeline), ``bench`` (simulation study),
``transform`` (counts to posterior means), ``init`` (initial estimate only)
and ``report`` (rebuild a degree report from a stored edge list).  Every
parameter is available as a flag and, for convenience, through a JSON config
file; on conflict the config file wins with a warning.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 config error.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from .bench import BenchConfig
from .errors import ConfigError, InvalidInputError, NumericalFailureError
from .glasso import DEFAULT_PATH_LENGTH, DEFAULT_PATH_RATIO
from .model import eb_gamma, fit_trend, mirna_shrink_init, moment_init, with_gamma
from .pipeline import (
    PipelineConfig,
    ingest,
    report_from_edges_tsv,
    run_bench,
    run_fit,
)
from .transform import DEFAULT_LARGE_COUNT_THRESHOLD, DEFAULT_REL_TOL, transform_matrix

EXIT_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_CONFIG = 4


def _merge_config_file(args: argparse.Namespace, parser_defaults: dict) -> None:
    """Fill parser defaults, letting an optional JSON config override flags."""
    overrides = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            overrides = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(overrides, dict):
            raise ConfigError("config file must contain a JSON object")
    for key, default in parser_defaults.items():
        flag_value = getattr(args, key, None)
        if key in overrides:
            if flag_value is not None and flag_value != overrides[key]:
                warnings.warn(
                    f"config file overrides --{key.replace('_', '-')}="
                    f"{flag_value!r} with {overrides[key]!r}"
                )
            setattr(args, key, overrides[key])
        elif flag_value is None:
            setattr(args, key, default)
    unknown = set(overrides) - set(parser_defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")


_FIT_DEFAULTS = {
    "orientation": "samples",
    "min_variance_quantile": 0.75,
    "depth_adjust": True,
    "initializer": "moment",
    "gamma": 0.5,
    "empirical_bayes": False,
    "eb_reps": 200,
    "large_count_threshold": DEFAULT_LARGE_COUNT_THRESHOLD,
    "rel_tol": DEFAULT_REL_TOL,
    "path_length": DEFAULT_PATH_LENGTH,
    "path_ratio": DEFAULT_PATH_RATIO,
    "ebic_gamma": 0.5,
    "top_k": 10,
    "seed": 0,
}

_BENCH_DEFAULTS = {
    "network": "hub",
    "n": 150,
    "p": 50,
    "replicates": 100,
    "hubs": 3,
    "edges": 204,
    "diag": None,
    "edge_weight": 0.25,
    "methods": "ORIG,LOG,BOX,ONESTEP,MODSTEP",
    "path_length": DEFAULT_PATH_LENGTH,
    "path_ratio": DEFAULT_PATH_RATIO,
    "fixed_graph": False,
    "seed": 0,
}


def _add_io_flags(sub, need_input=True):
    if need_input:
        sub.add_argument("--input", required=True, help="count matrix (CSV or TSV)")
    sub.add_argument("--output-dir", required=True, help="directory for artifacts")
    sub.add_argument("--config", help="JSON config file; overrides flags on conflict")


def _add_fit_flags(sub):
    sub.add_argument("--orientation", choices=("samples", "variables"))
    sub.add_argument("--min-variance-quantile", type=float, dest="min_variance_quantile")
    group = sub.add_mutually_exclusive_group()
    group.add_argument("--depth-adjust", dest="depth_adjust", action="store_const", const=True)
    group.add_argument("--no-depth-adjust", dest="depth_adjust", action="store_const", const=False)
    sub.add_argument("--initializer", choices=("moment", "mirna"))
    sub.add_argument("--gamma", type=float)
    sub.add_argument("--empirical-bayes", dest="empirical_bayes", action="store_const", const=True)
    sub.add_argument("--eb-reps", type=int, dest="eb_reps")
    sub.add_argument("--large-count-threshold", type=int, dest="large_count_threshold")
    sub.add_argument("--rel-tol", type=float, dest="rel_tol")
    sub.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plngraph",
        description="Sparse conditional-dependence networks from count data",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    fit = subs.add_parser("fit", help="run the full fitting pipeline")
    _add_io_flags(fit)
    _add_fit_flags(fit)
    fit.add_argument("--path-length", type=int, dest="path_length")
    fit.add_argument("--path-ratio", type=float, dest="path_ratio")
    fit.add_argument("--ebic-gamma", type=float, dest="ebic_gamma")
    fit.add_argument("--top-k", type=int, dest="top_k")

    tr = subs.add_parser("transform", help="write the transformed matrix only")
    _add_io_flags(tr)
    _add_fit_flags(tr)

    init = subs.add_parser("init", help="write the initial estimate only")
    _add_io_flags(init)
    _add_fit_flags(init)

    bench = subs.add_parser("bench", help="run the simulation benchmark")
    _add_io_flags(bench, need_input=False)
    bench.add_argument("--network", choices=("hub", "scale_free", "random"))
    bench.add_argument("--n", type=int)
    bench.add_argument("--p", type=int)
    bench.add_argument("--replicates", type=int)
    bench.add_argument("--hubs", type=int)
    bench.add_argument("--edges", type=int)
    bench.add_argument("--diag", type=float)
    bench.add_argument("--edge-weight", type=float, dest="edge_weight")
    bench.add_argument("--methods", help="comma-separated subset of " + ",".join(
        ("ORIG", "LOG", "BOX", "ONESTEP", "MODSTEP")))
    bench.add_argument("--path-length", type=int, dest="path_length")
    bench.add_argument("--path-ratio", type=float, dest="path_ratio")
    bench.add_argument("--fixed-graph", dest="fixed_graph", action="store_const", const=True)
    bench.add_argument("--seed", type=int)

    rep = subs.add_parser("report", help="rebuild a report from an edge list")
    rep.add_argument("--edges", required=True, help="edge list TSV")
    rep.add_argument("--output", required=True, help="report JSON path")
    rep.add_argument("--top-k", type=int, default=10, dest="top_k")

    return parser


def _pipeline_config(args) -> PipelineConfig:
    return PipelineConfig(
        input_path=args.input,
        output_dir=args.output_dir,
        orientation=args.orientation,
        min_variance_quantile=args.min_variance_quantile,
        depth_adjust=args.depth_adjust,
        initializer=args.initializer,
        gamma=args.gamma,
        empirical_bayes=args.empirical_bayes,
        eb_reps=args.eb_reps,
        large_count_threshold=args.large_count_threshold,
        rel_tol=args.rel_tol,
        path_length=getattr(args, "path_length", DEFAULT_PATH_LENGTH) or DEFAULT_PATH_LENGTH,
        path_ratio=getattr(args, "path_ratio", DEFAULT_PATH_RATIO) or DEFAULT_PATH_RATIO,
        ebic_gamma=getattr(args, "ebic_gamma", 0.5) or 0.5,
        top_k=getattr(args, "top_k", 10) or 10,
        seed=args.seed,
    )


def _build_estimate(data, args):
    if args.initializer == "moment":
        return moment_init(data)
    trend = fit_trend(data)
    if args.empirical_bayes:
        gammas = eb_gamma(data, trend, args.eb_reps, args.seed)
        trend = with_gamma(trend, gammas.gamma)
        return mirna_shrink_init(data, trend)
    return mirna_shrink_init(data, trend, args.gamma)


def _cmd_fit(args) -> int:
    run_fit(_pipeline_config(args))
    return 0


def _cmd_transform(args) -> int:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = ingest(args.input, args.orientation)
    estimate = _build_estimate(data, args)
    tm = transform_matrix(data, estimate, args.large_count_threshold, args.rel_tol)
    tm.to_csv(out / "transformed.csv", data.variable_names, data.sample_ids)
    tm.write_sidecar(out / "transformed.json")
    return 0


def _cmd_init(args) -> int:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = ingest(args.input, args.orientation)
    estimate = _build_estimate(data, args)
    with open(out / "initial_estimate.json", "w", encoding="utf-8") as fh:
        json.dump(estimate.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def _cmd_bench(args) -> int:
    methods = tuple(m.strip().upper() for m in args.methods.split(",") if m.strip())
    diag = args.diag
    if diag is None:
        diag = 3.0 if args.network == "random" else 1.0
    config = BenchConfig(
        n=args.n,
        p=args.p,
        kind=args.network,
        n_hubs=args.hubs,
        n_edges=args.edges,
        diag=diag,
        edge_weight=args.edge_weight,
        methods=methods,
        replicates=args.replicates,
        path_length=args.path_length,
        path_ratio=args.path_ratio,
        seed=args.seed,
        fixed_graph=bool(args.fixed_graph),
    )
    run_bench(config, args.output_dir)
    return 0


def _cmd_report(args) -> int:
    report = report_from_edges_tsv(args.edges, args.top_k)
    report.write_json(args.output)
    return 0


_DEFAULTS_BY_COMMAND = {
    "fit": _FIT_DEFAULTS,
    "transform": _FIT_DEFAULTS,
    "init": _FIT_DEFAULTS,
    "bench": _BENCH_DEFAULTS,
}

_HANDLERS = {
    "fit": _cmd_fit,
    "transform": _cmd_transform,
    "init": _cmd_init,
    "bench": _cmd_bench,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    np.seterr(all="ignore")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        defaults = _DEFAULTS_BY_COMMAND.get(args.command)
        if defaults is not None:
            _merge_config_file(args, defaults)
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvalidInputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalFailureError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
