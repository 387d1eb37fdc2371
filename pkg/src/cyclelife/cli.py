"""Command-line entry point.

Subcommands: ingest, curves, features, select, train, hbm, evaluate, sweep,
synth, run.  Every subcommand accepts --config FILE; explicit flags override
the config file.  Exit codes: 0 success, 2 validation error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, PipelineConfig, load_config
from .pipeline import (
    StageError,
    run_pipeline,
    stage_curves,
    stage_evaluate,
    stage_features,
    stage_hbm,
    stage_ingest,
    stage_select,
    stage_sweep,
    stage_synth,
    stage_train,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_STAGE = 3


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="pipeline config file (INI key=value)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cyclelife",
        description="Early-life battery lifetime prediction pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse raw cell CSVs into the dataset artifact")
    _add_config(p)
    p.add_argument("--manifest")
    p.add_argument("--data-dir")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--dod-boundary", type=float)

    p = sub.add_parser("curves", help="resample Q(V) curves and derivatives")
    _add_config(p)
    p.add_argument("--in", dest="infile")
    p.add_argument("--out")
    p.add_argument("--grid-points", type=int)
    p.add_argument("--smoothing", type=float)
    p.add_argument("--dump-csv")

    p = sub.add_parser("features", help="extract the early-life feature matrix")
    _add_config(p)
    p.add_argument("--in", dest="infile")
    p.add_argument("--weeks", help="later,earlier week pair (default 3,0)")
    p.add_argument("--out")
    p.add_argument("--search-window", action="store_true", default=None)
    p.add_argument("--no-search-window", dest="search_window", action="store_false")
    p.add_argument("--windows-audit")

    p = sub.add_parser("select", help="stepwise forward feature selection")
    _add_config(p)
    p.add_argument("--features")
    p.add_argument("--splits")
    p.add_argument("--k", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--max", dest="max_features", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("train", help="fit a lifetime model")
    _add_config(p)
    p.add_argument("--model", choices=["dummy", "conditions", "enet", "discharge"],
                   required=True)
    p.add_argument("--features")
    p.add_argument("--select", dest="select_trace")
    p.add_argument("--n-features", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory for fit JSON files")

    p = sub.add_parser("hbm", help="cluster + hierarchical Bayesian model")
    _add_config(p)
    p.add_argument("--features")
    p.add_argument("--cluster-feature")
    p.add_argument("--k", type=int)
    p.add_argument("--min-cluster-size", type=int)
    p.add_argument("--cell-features", help="comma-separated feature names")
    p.add_argument("--seed", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--draws", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--out")
    p.add_argument("--summary")

    p = sub.add_parser("evaluate", help="metrics tables and plot data files")
    _add_config(p)
    p.add_argument("--fits")
    p.add_argument("--splits")
    p.add_argument("--features")
    p.add_argument("--out")

    p = sub.add_parser("sweep", help="error grid over RPT week pairs")
    _add_config(p)
    p.add_argument("--in", dest="infile")
    p.add_argument("--pairs", help='e.g. "0:1,0:2,0:3"')
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("synth", help="generate a synthetic canonical dataset")
    _add_config(p)
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--groups", type=int)
    p.add_argument("--cells-per-group", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--half-week-min-group", type=int)

    p = sub.add_parser("run", help="run the full pipeline from a config file")
    _add_config(p)
    p.add_argument("--threads", type=int)

    return parser


def _load(args) -> PipelineConfig:
    if args.config:
        return load_config(args.config)
    return PipelineConfig()


def _override(section, **pairs) -> None:
    for key, value in pairs.items():
        if value is not None:
            setattr(section, key, value)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load(args)
        cmd = args.command
        if cmd == "ingest":
            _override(cfg.ingest, manifest=args.manifest, data_dir=args.data_dir,
                      out=args.out, seed=args.seed, dod_boundary=args.dod_boundary)
            out, splits = stage_ingest(cfg)
            print(f"wrote {out} and {splits}")
        elif cmd == "curves":
            _override(cfg.curves, infile=args.infile, out=args.out,
                      grid_points=args.grid_points, smoothing=args.smoothing,
                      dump_csv=args.dump_csv)
            print(f"wrote {stage_curves(cfg)}")
        elif cmd == "features":
            _override(cfg.features, infile=args.infile, out=args.out, weeks=args.weeks,
                      search_window=args.search_window, windows_audit=args.windows_audit)
            print(f"wrote {stage_features(cfg)}")
        elif cmd == "select":
            _override(cfg.select, features=args.features, splits=args.splits, k=args.k,
                      repeats=args.repeats, max_features=args.max_features,
                      seed=args.seed, out=args.out)
            print(f"wrote {stage_select(cfg)}")
        elif cmd == "train":
            _override(cfg.train, features=args.features, select=args.select_trace,
                      n_features=args.n_features, seed=args.seed, out_dir=args.out)
            print(f"wrote {stage_train(cfg, args.model)}")
        elif cmd == "hbm":
            _override(cfg.hbm, features=args.features, cluster_feature=args.cluster_feature,
                      k=args.k, min_cluster_size=args.min_cluster_size,
                      cell_features=args.cell_features, seed=args.seed,
                      chains=args.chains, draws=args.draws, warmup=args.warmup,
                      thin=args.thin, out=args.out, summary=args.summary)
            print(f"wrote {stage_hbm(cfg)}")
        elif cmd == "evaluate":
            _override(cfg.evaluate, fits=args.fits, splits=args.splits,
                      features=args.features, out=args.out)
            print(f"wrote {stage_evaluate(cfg)}")
        elif cmd == "sweep":
            _override(cfg.sweep, infile=args.infile, pairs=args.pairs, seed=args.seed,
                      out=args.out)
            print(f"wrote {stage_sweep(cfg)}")
        elif cmd == "synth":
            _override(cfg.synth, out_dir=args.out_dir, seed=args.seed,
                      n_groups=args.groups, cells_per_group=args.cells_per_group,
                      noise=args.noise, half_week_min_group=args.half_week_min_group)
            print(f"wrote {stage_synth(cfg)}")
        elif cmd == "run":
            if not args.config:
                raise ConfigError("run requires --config FILE")
            _override(cfg.run, threads=args.threads)
            print(f"report in {run_pipeline(cfg)}")
        else:  # pragma: no cover
            parser.error(f"unknown command {cmd}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
