"""The ``dvc`` command line: run pipeline stages, the full run, or a sweep.

Usage::

    dvc <stage> --config cfg.json [--seed N] [--out dir]
    dvc all --config cfg.json [--seed N] [--out dir]
    dvc sweep --config cfg.json --vocab 100,500 --window 1,3

Exit code 0 on success, nonzero with a diagnostic on stderr otherwise.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .dataset import AnnotationError, FeatureFileError
from .pipeline import (STAGES, PipelineError, load_config, run_all, run_stage,
                       sweep)


def _int_list(text: str) -> list:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dvc",
        description="Dense video captioning lab over clip-feature sequences.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="pipeline config JSON")
        p.add_argument("--seed", type=int, default=None, help="override the pipeline seed")
        p.add_argument("--out", default=None, help="override the output directory")

    for stage in STAGES:
        add_common(sub.add_parser(stage, help=f"run the '{stage}' stage"))
    add_common(sub.add_parser("all", help="run every stage in order"))

    sp = sub.add_parser("sweep", help="vocabulary-size x context-window sweep")
    add_common(sp)
    sp.add_argument("--vocab", type=_int_list, required=True,
                    help="comma-separated vocabulary sizes, e.g. 100,500")
    sp.add_argument("--window", type=_int_list, required=True,
                    help="comma-separated context windows, e.g. 1,3")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.out is not None:
            cfg = dataclasses.replace(cfg, out_dir=args.out)

        if args.command == "all":
            out = run_all(cfg)
            print(f"pipeline complete: {out}")
        elif args.command == "sweep":
            rows = sweep(cfg, args.vocab, args.window)
            print(f"sweep complete: {len(rows)} cells -> "
                  f"{cfg.out_dir}/sweep/sweep_table.txt")
        else:
            out = run_stage(args.command, cfg)
            print(f"stage '{args.command}' complete: {out}")
        return 0
    except (PipelineError, AnnotationError, FeatureFileError, ValueError,
            OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
