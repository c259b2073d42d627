"""Command-line front end: ``backdoor-lab <command> [options]``.

Exit codes: 0 success, 2 config/input error, 3 fixture gate failure,
4 numeric error, 5 unlearning non-convergence, 1 anything else (e.g. I/O).
"""

import argparse
import logging
import sys

from . import harness
from .errors import BackdoorLabError, ConfigError

log = logging.getLogger("backdoor_lab")


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", help="key = value config file")
    p.add_argument("--seed", type=int, action="append", metavar="N",
                   help="run only this seed (repeatable); overrides run.seeds")
    p.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
    p.add_argument("--format", choices=["csv"], default="csv", help="report format")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog="backdoor-lab", parents=[common],
                                     description="Backdoor attack and unlearning/relearning defense lab.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write clean, test and poisoned datasets")
    sub.add_parser("attack", parents=[common], help="train backdoored models and check fixture gates")
    p = sub.add_parser("defend", parents=[common], help="run the defense on backdoored checkpoints")
    p.add_argument("--checkpoint", metavar="PATH", help="use this checkpoint for every seed")
    p = sub.add_parser("sweep", parents=[common], help="sweep one parameter over seeds")
    p.add_argument("--param", required=True, choices=sorted(harness.SWEEP_PARAMETERS))
    p.add_argument("--values", required=True, help="comma-separated values")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    return parser


def resolve_config(args):
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg = cfg.with_value(key.strip(), value)
    if args.seed:
        cfg = cfg.with_value("run.seeds", ",".join(str(s) for s in args.seed))
    return cfg


def run(args):
    cfg = resolve_config(args)
    if args.command == "gen-data":
        return harness.cmd_gen_data(cfg, args.out)
    if args.command == "attack":
        return harness.cmd_attack(cfg, args.out)
    if args.command == "defend":
        return harness.cmd_defend(cfg, args.out, args.checkpoint)
    if args.command == "sweep":
        values = tuple(v.strip() for v in args.values.split(",") if v.strip())
        return harness.cmd_sweep(harness.SweepSpec(args.param, values, cfg), args.out)
    return harness.cmd_eval(cfg, args.out, args.checkpoint)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except BackdoorLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
