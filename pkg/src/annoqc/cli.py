"""Command line entry point.

Every failure is reported on stderr as one JSON record per line. Exit codes:
0 success, 1 fatal error, 2 usage error, 3 finished with skipped files or
images.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .masks import ImageError
from .pipeline import (
    PipelineConfig,
    PipelineError,
    Problems,
    load_annotation_sets,
    load_config_file,
    mask_root,
    run_agreement,
    run_consensus,
    run_filter,
    run_ingest,
    run_report,
    run_simulate,
)
from .synthetic import SimulationError

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_PARTIAL = 3

CONFIG_KEYS = {
    "input": str,
    "output": str,
    "threshold": float,
    "min_speckle_size": int,
    "connectivity": int,
    "alpha": str,
    "tolerance": int,
    "use_filtered": bool,
    "backgrounds": dict,
}


def _add_common(p: argparse.ArgumentParser) -> None:
    # defaults are None so that config-file values can fill the gaps
    p.add_argument("--input", help="input root (raw annotations, or normalized masks for later stages)")
    p.add_argument("--output", help="output root")
    p.add_argument("--config", help="YAML/JSON config file; flags take precedence")
    p.add_argument("--threshold", type=float, help="median Dice below which annotators are excluded (default 0.9)")
    p.add_argument("--min-speckle-size", type=int, dest="min_speckle_size",
                   help="components smaller than this are removed (default 2)")
    p.add_argument("--connectivity", type=int, choices=(4, 8), help="default 8")
    p.add_argument("--alpha", choices=("ignore", "include"), help="alpha channel policy (default ignore)")
    p.add_argument("--tolerance", type=int, help="background match tolerance per channel (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="annoqc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_ in [
        ("ingest", "post-process raw annotation PNGs into normalized masks"),
        ("agreement", "pairwise Dice matrices and median agreement"),
        ("filter", "exclude annotators by median pairwise Dice"),
        ("report", "run the full chain"),
    ]:
        _add_common(sub.add_parser(name, help=help_))

    p = sub.add_parser("consensus", help="mean/union/intersection/disagreement maps")
    _add_common(p)
    p.add_argument("--use-filtered", action="store_true", default=None, dest="use_filtered",
                   help="only use annotators kept by the filter stage")

    p = sub.add_parser("simulate", help="generate a synthetic annotator cohort")
    p.add_argument("--seed-manifest", required=True, dest="seed_manifest",
                   help="YAML/JSON list of annotator profiles (with seeds)")
    p.add_argument("--truth", required=True, help="ground-truth mask PNG (0/255)")
    p.add_argument("--output", required=True)
    p.add_argument("--image-id", default="sim", dest="image_id")
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    values = {}
    if getattr(args, "config", None):
        data = load_config_file(args.config)
        unknown = set(data) - set(CONFIG_KEYS)
        if unknown:
            raise PipelineError("invalid-config", f"unknown config keys: {sorted(unknown)}", args.config)
        for k, v in data.items():
            try:
                values[k] = CONFIG_KEYS[k](v)
            except (TypeError, ValueError):
                raise PipelineError("invalid-config", f"bad value for {k}: {v!r}", args.config)
    for k in CONFIG_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    cfg = PipelineConfig(**values)
    if cfg.output is None:
        raise PipelineError("invalid-config", "--output is required")
    cfg.validate()
    return cfg


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.ERROR,
        format="%(levelname)s %(name)s: %(message)s",
    )
    problems = Problems()
    try:
        if args.command == "simulate":
            manifest = run_simulate(args.seed_manifest, args.truth, args.output, args.image_id, args.connectivity)
            print(json.dumps({"image_id": manifest["image_id"], "annotator_count": manifest["annotator_count"]}))
            return EXIT_OK

        cfg = resolve_config(args)
        if args.command in ("ingest", "report") and cfg.input is None:
            raise PipelineError("invalid-config", "--input is required")
        if args.command == "ingest":
            run_ingest(cfg, problems)
        elif args.command == "report":
            run_report(cfg, problems)
        else:
            root = Path(cfg.input) if cfg.input else mask_root(cfg)
            sets = load_annotation_sets(root, problems)
            if args.command == "agreement":
                run_agreement(cfg, problems, sets)
            elif args.command == "filter":
                run_filter(cfg, problems, sets)
            else:
                run_consensus(cfg, problems, bool(cfg.use_filtered), sets)
    except (PipelineError, ImageError) as exc:
        rec = exc.record() if isinstance(exc, PipelineError) else {
            "level": "error", "kind": exc.kind, "message": str(exc), "path": exc.path,
        }
        _emit(rec)
        return EXIT_FATAL
    except SimulationError as exc:
        _emit({"level": "error", "kind": "simulation-failed", "message": str(exc), "path": None})
        return EXIT_FATAL

    for rec in problems.records:
        _emit(rec)
    return EXIT_PARTIAL if problems else EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
