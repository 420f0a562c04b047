"""Command line entry points.

    gvalign run   --config cfg.json [--seed N] [--out DIR] [--method NAME]
    gvalign sweep --config cfg.json --exemplars 5,10,15,20 [--methods a,b]

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys

from .experiment import ConfigError, load_config, run, sweep


def _apply_overrides(config, args):
    doc = config.to_dict()
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.out is not None:
        doc["out_dir"] = args.out
    if getattr(args, "method", None) is not None:
        doc["method"] = args.method
    return type(config).from_dict(doc)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gvalign",
        description="Two-stage long-tail class-incremental learning experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    p_run.add_argument("--config", required=True, help="path to JSON config")
    p_run.add_argument("--seed", type=int, default=None, help="override config seed")
    p_run.add_argument("--out", default=None, help="override output directory")
    p_run.add_argument("--method", default=None, help="override method variant")

    p_sweep = sub.add_parser("sweep", help="sweep over exemplar budgets")
    p_sweep.add_argument("--config", required=True, help="path to JSON config")
    p_sweep.add_argument(
        "--exemplars", required=True, help="comma-separated exemplar counts, e.g. 5,10,15,20"
    )
    p_sweep.add_argument("--methods", default=None, help="comma-separated method variants")
    p_sweep.add_argument("--seed", type=int, default=None, help="override config seed")
    p_sweep.add_argument("--out", default=None, help="override output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _apply_overrides(load_config(args.config), args)
        if args.command == "sweep":
            counts = [int(v) for v in args.exemplars.split(",") if v.strip()]
            methods = args.methods.split(",") if args.methods else None
            rows = sweep(config, counts, methods=methods)
            for row in rows:
                print(
                    f"method={row['method']} exemplars={row['exemplars']} "
                    f"avg_inc_acc={row['avg_inc_acc']:.4f}"
                )
        else:
            result = run(config)
            print(
                f"method={config.method} seed={config.seed} "
                f"avg_inc_acc={result.average_incremental_accuracy:.4f} "
                f"out={config.out_dir}"
            )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
