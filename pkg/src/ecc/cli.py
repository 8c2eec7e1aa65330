"""Command-line entry point: ``ecc <command> [--config FILE] [--seed N] [--budget J]``."""
import argparse
import json
import logging
import sys

import yaml

from . import pipeline
from .energy import OracleError, read_exchange
from .solver import InfeasibleBudgetError, IterationLimitError

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_INFEASIBLE = 2
EXIT_ITERATION_LIMIT = 3
EXIT_ORACLE = 4

STAGES = {
    "train": pipeline.cmd_train,
    "profile": pipeline.cmd_profile,
    "fit-energy": pipeline.cmd_fit_energy,
    "compress": pipeline.cmd_compress,
    "finetune": pipeline.cmd_finetune,
    "run": pipeline.cmd_run,
}


def _parse_value(text):
    return yaml.safe_load(text)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (default: built-in toy run)")
    common.add_argument("--seed", type=int, help="override the top-level seed")
    common.add_argument("--budget", type=float, help="energy budget in joules")
    common.add_argument("--output-dir", help="override output_dir")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. solver.max_iter=500")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="ecc", description="Energy-constrained channel pruning.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the dense network")
    sub.add_parser("profile", parents=[common], help="measure energy at sampled widths (resumable)")
    sub.add_parser("fit-energy", parents=[common], help="fit the bilinear energy model")
    sub.add_parser("compress", parents=[common], help="prune the dense network to the budget")
    sub.add_parser("finetune", parents=[common], help="fine-tune with pruned channels held at zero")
    ev = sub.add_parser("evaluate", parents=[common], help="accuracy and energy of a checkpoint")
    ev.add_argument("--checkpoint", help="checkpoint file (default: the fine-tuned one)")
    sub.add_parser("run", parents=[common], help="all stages from training to evaluation")

    ver = sub.add_parser("verify", help="check the prox and energy gradient against slow oracles")
    ver.add_argument("instances", nargs="?", help="instance file (default: shipped samples)")
    ver.add_argument("--random", type=int, metavar="N",
                     help="check N seeded random instances instead of a file")
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--threshold-scale", type=float, default=1.0,
                     help="scale the prox keep-threshold (values other than 1 should fail)")

    ms = sub.add_parser("measure-sim", parents=[common],
                        help="answer one external-oracle request with the simulated device")
    ms.add_argument("exchange", help="request file written by the external oracle")
    return parser


def load_config(args):
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise pipeline.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key] = _parse_value(value)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.budget is not None:
        overrides["solver.budget"] = args.budget
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    return pipeline.PipelineConfig.load(args.config, overrides)


def _run(args):
    if args.command == "verify":
        if args.random:
            doc = pipeline.generate_verify_instances(args.random, args.random, seed=args.seed)
        else:
            doc = pipeline.load_verify_instances(args.instances)
        results = pipeline.cmd_verify(doc, pipeline.make_prox(args.threshold_scale))
        return EXIT_OK if all(r.passed for r in results) else EXIT_OTHER

    cfg = load_config(args)
    if args.command == "measure-sim":
        print(repr(pipeline.measure_simulated(cfg, read_exchange(args.exchange))))
        return EXIT_OK
    handler = pipeline.attach_run_log(cfg)
    try:
        pipeline.log.info("%s: config %s seeds %s", args.command, cfg.config_hash(),
                          json.dumps(cfg.seeds(), sort_keys=True))
        if args.command == "evaluate":
            pipeline.cmd_evaluate(cfg, args.checkpoint)
        else:
            STAGES[args.command](cfg)
    finally:
        pipeline.log.removeHandler(handler)
        handler.close()
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "verbose", False):
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        return _run(args)
    except InfeasibleBudgetError as exc:
        print(f"error: infeasible budget: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except IterationLimitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ITERATION_LIMIT
    except OracleError as exc:
        where = getattr(exc, "sample_index", None)
        at = f" at sample {where}" if where is not None else ""
        print(f"error: energy measurement failed{at}: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
