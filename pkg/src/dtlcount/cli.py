"""``dtl-count`` command line interface.

Exit codes are a stable contract: 0 success, 1 verification failure,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import sys
import traceback

from . import harness
from .config import ExperimentConfig
from .errors import DtlError

ABLATION_CHOICES = ("none", "no_disentangle", "no_synth", "joint_finetune")

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_USAGE = 2


def _add_common(parser, out_required=False):
    parser.add_argument("--config", metavar="PATH",
                        help="experiment config INI (defaults apply if omitted)")
    parser.add_argument("--seed", type=int, metavar="U64",
                        help="override the global seed")
    parser.add_argument("--out", metavar="DIR", required=out_required,
                        help="output directory")
    parser.add_argument("--workers", type=int, default=1, metavar="N",
                        help="parallel workers for synthesis compositing and "
                             "evaluation inference (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dtl-count",
        description="Disentangled cross-domain cell counting: generate "
                    "domains, pretrain, synthesize target data, run "
                    "progressive transfer, and report results.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render the configured datasets to disk")
    _add_common(p, out_required=True)

    p = sub.add_parser("pretrain", help="train the source-domain counter")
    _add_common(p, out_required=True)
    p.add_argument("--data", metavar="DIR",
                   help="pre-generated source dataset (default: generate "
                        "from config)")

    p = sub.add_parser("synthesize",
                       help="build target-domain training images from a few "
                            "annotated ones")
    _add_common(p, out_required=True)
    p.add_argument("--few", metavar="DIR", required=True,
                   help="directory with the few annotated target images")

    p = sub.add_parser("transfer", help="run the progressive transfer protocol")
    _add_common(p, out_required=True)
    p.add_argument("--ablation", choices=ABLATION_CHOICES,
                   help="protocol variant (default from config)")

    p = sub.add_parser("evaluate", help="MAE of a checkpoint on a dataset")
    p.add_argument("--ckpt", metavar="PATH", required=True)
    p.add_argument("--data", metavar="DIR", required=True)
    p.add_argument("--out", metavar="DIR",
                   help="also write evaluation.tsv and a scatter figure here")
    p.add_argument("--workers", type=int, default=1, metavar="N")

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of every op and the "
                            "full loss (64-bit)")
    p.add_argument("--config", metavar="PATH",
                   help="accepted for interface symmetry; the check always "
                        "runs the pinned tiny model")

    p = sub.add_parser("report", help="combine run reports into one table")
    p.add_argument("run_dirs", nargs="+", metavar="RUN_DIR")
    p.add_argument("--out", metavar="PATH", help="also write the table here")

    p = sub.add_parser("bench",
                       help="full benchmark: transfer vs direct training "
                            "over several seeds")
    _add_common(p, out_required=True)
    return parser


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        config = ExperimentConfig.from_file(args.config)
    else:
        config = ExperimentConfig.defaults()
    return config.override(seed=getattr(args, "seed", None),
                           out=getattr(args, "out", None),
                           ablation=getattr(args, "ablation", None))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            return harness.cmd_generate(_load_config(args), args.out)
        if args.command == "pretrain":
            return harness.cmd_pretrain(_load_config(args), args.out,
                                        data_dir=args.data)
        if args.command == "synthesize":
            return harness.cmd_synthesize(_load_config(args), args.few,
                                          args.out, workers=args.workers)
        if args.command == "transfer":
            return harness.cmd_transfer(_load_config(args), args.out,
                                        workers=args.workers)
        if args.command == "evaluate":
            return harness.cmd_evaluate(args.ckpt, args.data,
                                        out_dir=args.out, workers=args.workers)
        if args.command == "gradcheck":
            return harness.cmd_gradcheck()
        if args.command == "report":
            return harness.cmd_report(args.run_dirs, out_path=args.out)
        if args.command == "bench":
            return harness.cmd_bench(_load_config(args), args.out,
                                     workers=args.workers)
        raise AssertionError(f"unhandled command {args.command}")
    except DtlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:
        traceback.print_exc()
        return EXIT_VERIFICATION


if __name__ == "__main__":
    sys.exit(main())
