"""Command line entry point: ``sofa {generate,train,eval,masks,report-merge}``.

Exit codes: 0 success, 1 usage error, 2 runtime or data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .layout import parse_layout
from .mask import build_mask, mask_to_csv, parse_variant


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    for name in ex.config_field_types():
        p.add_argument("--" + name.replace("_", "-"), dest="cfg_" + name, metavar="VALUE")


def _resolve_config(args) -> ex.ExperimentConfig:
    pairs = ex.read_config_file(args.config) if args.config else {}
    for name in ex.config_field_types():
        v = getattr(args, "cfg_" + name, None)
        if v is not None:
            pairs[name] = v
    try:
        return ex.ExperimentConfig(**ex.parse_overrides(pairs))
    except (ValueError, TypeError) as e:
        raise UsageError(str(e)) from e


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sofa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("generate", help="write PQA scenario datasets")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train the surrogate decoder with causal masks")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="position-bias report for a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--eval-sigma", dest="eval_sigma", type=float, help="sigma to evaluate")
    p.add_argument("--calibrate", action="store_true", help="pick sigma on the validation split")

    p = sub.add_parser("masks", help="print a dense mask as CSV")
    p.add_argument("layout", help='segment string, e.g. "T2 I2 T1 I2"')
    p.add_argument("--variant", default="causal", choices=["causal", "isolated", "bidirectional", "soft"])
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--out")

    p = sub.add_parser("report-merge", help="merge report.json files into one CSV")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out")
    return parser


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            raise UsageError("missing command")
        if args.command == "masks":
            try:
                layout = parse_layout(args.layout)
                variant = parse_variant(args.variant, args.sigma)
            except ValueError as e:
                raise UsageError(str(e)) from e
            _emit(mask_to_csv(build_mask(layout, variant)), args.out)
            return 0
        if args.command == "report-merge":
            _emit(ex.merge_reports(args.reports), args.out)
            return 0
        config = _resolve_config(args)
        if args.command == "generate":
            for f in ex.run_generate(config):
                print(f)
        elif args.command == "train":
            print(ex.run_train(config))
        elif args.command == "eval":
            if args.calibrate and args.eval_sigma is not None:
                raise UsageError("--eval-sigma and --calibrate are mutually exclusive")
            if args.eval_sigma is not None and not 0.0 <= args.eval_sigma <= 1.0:
                raise UsageError("--eval-sigma must lie in [0, 1]")
            print(ex.run_eval(config, args.checkpoint, args.eval_sigma, args.calibrate))
        return 0
    except UsageError as e:
        print(f"sofa: usage error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as e:
        print(f"sofa: error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
