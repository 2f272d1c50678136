"""``codapipe`` command line.

Exit codes: 0 success, 1 a pipeline stage failed, 2 bad configuration or
input.
"""

from __future__ import annotations

import argparse
import logging
import sys

from ..errors import CodaError
from .config import load_config
from .ingest import ingest
from .run import run_pipeline


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="codapipe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the full analysis")
    run.add_argument("config", help="path to the INI configuration")
    run.add_argument("--seed", type=int, help="master seed (overrides [run] seed)")
    run.add_argument("--out-dir", help="output directory (overrides [run] out_dir)")
    run.add_argument("--skip-tsne", action="store_true", help="leave out the t-SNE stage")
    run.add_argument("--repetitions", type=int, help="imputation repetitions")

    val = sub.add_parser("validate", help="check the configuration and inputs only")
    val.add_argument("config", help="path to the INI configuration")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "validate":
            data = ingest(cfg)
            for line in data.log:
                print(line)
            print(f"config hash {cfg.hash()}")
            print("ok")
            return 0
        cfg = cfg.with_overrides(seed=args.seed, out_dir=args.out_dir,
                                 skip_tsne=args.skip_tsne, repetitions=args.repetitions)
    except CodaError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    report, code = run_pipeline(cfg)
    if code:
        stage = report.get("failed_stage")
        print(f"error: {report['stages'][stage]['error']} (stage {stage})", file=sys.stderr)
    else:
        print(f"wrote results to {cfg.out_dir}")
    return code


if __name__ == "__main__":
    sys.exit(main())
