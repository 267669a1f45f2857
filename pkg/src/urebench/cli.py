"""Command-line entry point.

Exit status: 0 success, 1 internal failure, 2 configuration error,
3 missing prerequisite artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as C
from . import workbench as W
from .attribution import METHODS

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3

_STAGE_OF = {"generate": "generate", "train": "train", "sweep": "sweep", "explain": "explain", "report": "report"}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="urebench", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "evaluate", "sweep", "explain", "report", "all"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="experiment config (defaults built in when omitted)")
        sp.add_argument("--out", type=Path, default=Path("runs"))
        sp.add_argument("--seed", type=int, help="override the run seed")
        if name == "all":
            sp.add_argument("--stages", default=",".join(W.STAGES),
                            help="comma-separated subset of " + ",".join(W.STAGES))
        if name in ("explain", "all"):
            sp.add_argument("--method", choices=METHODS, action="append",
                            help="attribution method (repeatable)")
            sp.add_argument("--samples-per-class", type=int)
    sub.add_parser("default-config", help="print the default config")
    return p


def _load_config(args) -> C.ExperimentConfig:
    cfg = C.load(args.config) if args.config else C.ExperimentConfig()
    C.validate(cfg)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "default-config":
        sys.stdout.write(C.serialize(C.ExperimentConfig()))
        return EXIT_OK
    try:
        cfg = _load_config(args)
        methods = tuple(getattr(args, "method", None) or ()) or None
        per_class = getattr(args, "samples_per_class", None)
        if per_class is not None and per_class < 1:
            raise C.ConfigError("--samples-per-class", "must be >= 1")
        if args.command == "all":
            stages = [s.strip() for s in args.stages.split(",") if s.strip()]
            unknown = [s for s in stages if s not in W.STAGES]
            if unknown:
                raise C.ConfigError("--stages", f"unknown stages {unknown}")
            meta = W.run_pipeline(cfg, args.out, stages, methods, per_class)
        elif args.command == "evaluate":
            layout = W.Layout(cfg, args.out)
            root = W.stage_sweep(cfg, layout, sigmas=[], root=layout.evaluate())
            for variant, reports in W.load_sweep(root, "evaluate").items():
                W.emit_tables(reports, root / f"{variant}_clean")
            meta = {"directories": [str(root.relative_to(args.out))]}
        else:
            meta = W.run_pipeline(cfg, args.out, [_STAGE_OF[args.command]], methods, per_class)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except W.MissingPrerequisite as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        logging.getLogger(__name__).exception("internal failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    print(json.dumps({"directories": meta.get("directories", [])}))
    return EXIT_OK


def main(argv=None) -> int:
    return run(argv)
