"""Command-line entry point: ``rtn {train,eval,warp,gen,gradcheck,ablate}``.

Exit codes: 0 success, 1 usage error, 2 data or parse error, 3 numerical
failure.  Failures print one JSON line ``{"error": kind, "reason": ...}``
on stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rtn", description="Recurrent affine-field matching on synthetic pairs.")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (1 keeps runs bit-reproducible)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", help="train from scratch on synthetic pairs")
    t.add_argument("--config", help="run config file; defaults when omitted")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--set", help="directory written by 'rtn gen'")
    src.add_argument("--synthetic", type=int, metavar="N", help="N held-out synthetic pairs")
    e.add_argument("--report", required=True, help="CSV output (pair_id, metric, value)")
    e.add_argument("--config")

    w = sub.add_parser("warp", help="warp a source image onto a target")
    w.add_argument("--checkpoint", required=True)
    w.add_argument("--source", required=True)
    w.add_argument("--target", required=True)
    w.add_argument("--out", required=True)
    w.add_argument("--config")

    g = sub.add_parser("gen", help="write synthetic pairs with ground truth")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--samples", type=int, default=20)
    c.add_argument("--size", type=int, default=16)

    a = sub.add_parser("ablate", help="accuracy over iteration counts and window sizes")
    a.add_argument("--iterations", type=_int_list, default=[1, 2, 3, 4, 5])
    a.add_argument("--windows", type=_int_list, default=[5], help="window side lengths (odd)")
    a.add_argument("--out", required=True)
    a.add_argument("--config")
    a.add_argument("--steps", type=int, help="training steps per window size")
    a.add_argument("--checkpoint", action="append", default=[], metavar="SIDE=PATH",
                   help="reuse a trained checkpoint for a window side instead of training")
    a.add_argument("--pairs", type=int)
    return p


def _fail(kind: str, code: int, reason: str) -> int:
    print(json.dumps({"error": kind, "reason": reason}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, str(exc))
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(args.threads))

    import logging

    from . import commands
    from .data import ConfigError, ParseError
    from .evaluation import MetricError
    from .train import NumericalError

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return getattr(commands, f"cmd_{args.command}")(args)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, str(exc))
    except (ConfigError, ParseError, MetricError, FileNotFoundError, IsADirectoryError) as exc:
        return _fail("data", EXIT_DATA, str(exc))
    except (NumericalError, FloatingPointError) as exc:
        return _fail("numerical", EXIT_NUMERIC, str(exc))


if __name__ == "__main__":
    sys.exit(main())
