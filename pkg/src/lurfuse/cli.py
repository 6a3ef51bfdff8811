"""Command-line interface.

Subcommands mirror the pipeline stages and are independently invocable
on the previous stage's files; `run` composes them.  Exit codes:
0 success, 2 validation failure, 3 stage failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import load_config
from .dataio import parse_timestamp
from .errors import PipelineError, ValidationError
from .fixture import FixtureParams, generate_fixture
from .pipeline import run_pipeline, run_stage

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_STAGE = 3

log = logging.getLogger("lurfuse")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lurfuse",
        description="Land-use regression + hourly sensor fusion pipeline",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixture", help="generate the synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="dataset directory")
    p.add_argument("--n-sites", type=int, default=31)

    def add_config_out(p, out_required=True):
        p.add_argument("--config", type=Path, required=True)
        p.add_argument("--out", type=Path, required=out_required,
                       help="output directory (stage files live here)")

    p = sub.add_parser("run", help="execute all stages and write the manifest")
    add_config_out(p)
    p.add_argument("--plots", action="store_true", help="also emit SVG plots")

    p = sub.add_parser("ingest", help="validate inputs, write validation report")
    add_config_out(p)

    p = sub.add_parser("features", help="predictor table, means, selections")
    add_config_out(p)
    p.add_argument("--approach", type=int, choices=(1, 2, 3), default=None)
    p.add_argument("--buffer-corr", choices=("abs", "signed"), default=None)

    p = sub.add_parser("train", help="CV/tune/fit the forests")
    add_config_out(p)
    p.add_argument("--mtry-grid", type=str, default=None, help="comma-separated mtry values")
    p.add_argument("--k", type=int, default=None, help="CV folds")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("fuse", help="hourly scaling + residuals")
    add_config_out(p)
    p.add_argument("--min-sites", type=int, default=None)
    p.add_argument("--with-intercept", action="store_true", default=None)

    p = sub.add_parser("diagnose", help="variance fractions, polar bins, boxstats")
    add_config_out(p)
    p.add_argument("--sectors", type=int, default=None)
    p.add_argument("--plots", action="store_true")

    p = sub.add_parser("map", help="gridded static + hourly surfaces")
    add_config_out(p)
    p.add_argument("--resolution", type=float, default=None)
    p.add_argument("--hour", type=str, default=None, help="ISO hour for the scaled surface")
    return parser


def _config_with_overrides(args) -> object:
    config = load_config(args.config)
    command = args.command
    if command == "features":
        if args.approach is not None:
            config = dataclasses.replace(config, approach=args.approach)
        if args.buffer_corr is not None:
            config = dataclasses.replace(config, buffer_corr=args.buffer_corr)
    elif command == "train":
        forest = config.forest
        if args.mtry_grid is not None:
            grid = tuple(int(v) for v in args.mtry_grid.split(",") if v.strip())
            forest = dataclasses.replace(forest, mtry_grid=grid)
        if args.k is not None:
            forest = dataclasses.replace(forest, k_folds=args.k)
        config = dataclasses.replace(config, forest=forest)
        if args.seed is not None:
            config = dataclasses.replace(config, seed=args.seed)
    elif command == "fuse":
        fusion = config.fusion
        if args.min_sites is not None:
            fusion = dataclasses.replace(fusion, min_sites=args.min_sites)
        if args.with_intercept:
            fusion = dataclasses.replace(fusion, with_intercept=True)
        config = dataclasses.replace(config, fusion=fusion)
    elif command == "diagnose":
        if args.sectors is not None:
            config = dataclasses.replace(
                config, diagnostics=dataclasses.replace(config.diagnostics, sectors=args.sectors)
            )
    elif command == "map":
        mapping = config.mapping
        if args.resolution is not None:
            mapping = dataclasses.replace(mapping, resolution=args.resolution)
        if args.hour is not None:
            mapping = dataclasses.replace(mapping, hour=parse_timestamp(args.hour))
        config = dataclasses.replace(config, mapping=mapping)
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "fixture":
            params = FixtureParams(seed=args.seed, n_sites=args.n_sites)
            paths = generate_fixture(args.out, params)
            log.info("fixture written to %s", args.out)
            print(json.dumps({k: str(v) for k, v in paths.items()}, indent=1))
            return EXIT_OK
        config = _config_with_overrides(args)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "run":
            manifest = run_pipeline(config, out, plots=args.plots)
            print(json.dumps({"outputs": len(manifest["outputs"]),
                              "wall_clock_s": round(manifest["wall_clock_s"], 2)}))
        else:
            run_stage(args.command, config, out, plots=getattr(args, "plots", False))
        return EXIT_OK
    except ValidationError as exc:
        report = {"error": "validation", "message": str(exc), "rows": exc.row_errors}
        print(json.dumps(report, default=str), file=sys.stderr)
        return EXIT_VALIDATION
    except PipelineError as exc:
        report = {"error": "stage_failure", "stage": exc.stage, "message": str(exc)}
        print(json.dumps(report, default=str), file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
