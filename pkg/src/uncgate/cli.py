"""Command line entry point: ``python -m uncgate <command>``.

Commands::

    generate   write the synthetic benchmark
    train      fit one stage, or all four in order
    eval       score streams on the test split
    ablate     mapper loss-family ablation over several seeds
    report     rebuild the binned report from the per-scene log

The output root comes from ``--out``, else the config's ``out`` key, else
``$UNCGATE_OUT``, else ``./runs/default``.  Failures exit with the code
carried by the exception: 2 for configuration, 3 for a missing artifact,
4 for a numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import STREAM_TAGS, load_config
from .errors import ConfigError, UncGateError
from .metrics import report_csv
from .pipeline import TRAIN_STAGES, Pipeline, manifest_summary

ENV_OUT = "UNCGATE_OUT"
log = logging.getLogger("uncgate")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="reseed every component from this value")
    common.add_argument("--out", help=f"output root (default: ${ENV_OUT} or ./runs/default)")

    p = argparse.ArgumentParser(prog="uncgate", description="Train and evaluate the gated trajectory prediction pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write the synthetic benchmark")
    t = sub.add_parser("train", parents=[common], help="train a stage")
    t.add_argument("--stage", choices=(*TRAIN_STAGES, "all"), default="all")
    e = sub.add_parser("eval", parents=[common], help="evaluate streams on the test split")
    e.add_argument("--streams", help=f"comma-separated subset of {','.join(STREAM_TAGS)}")
    e.add_argument("--svg", type=int, metavar="N", help="render the first N test scenes as SVG")
    sub.add_parser("ablate", parents=[common], help="mapper loss-family ablation")
    sub.add_parser("report", parents=[common], help="rebuild the report from the per-scene log")
    return p


def _resolve(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = args.out or cfg.out or os.environ.get(ENV_OUT) or "runs/default"
    cfg.out = str(out)
    return cfg, Path(out)


def _streams(text):
    if text is None:
        return None
    streams = tuple(s.strip() for s in text.split(",") if s.strip())
    bad = set(streams) - set(STREAM_TAGS)
    if bad or not streams:
        raise ConfigError(f"--streams must name a subset of {STREAM_TAGS}, got {text!r}")
    return streams


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    cfg, out = _resolve(args)
    pipe = Pipeline(cfg, out)
    if args.command == "generate":
        pipe.generate()
        print(manifest_summary(pipe.data_dir))
    elif args.command == "train":
        stages = TRAIN_STAGES if args.stage == "all" else (args.stage,)
        for stage in stages:
            res = pipe.train(stage)
            print(f"{stage}: best epoch {res.best_epoch}, checkpoint {pipe.checkpoint(stage)}")
    elif args.command == "eval":
        rows = pipe.evaluate(_streams(args.streams), args.svg)
        print(report_csv(rows), end="")
    elif args.command == "ablate":
        table = pipe.ablate()
        for r in table:
            print(f"{r['variant']:>15} {str(r['seed']):>5}  nll {r['mapper_nll']:8.4f}  "
                  f"minADE {r['minADE']:.4f}  minFDE {r['minFDE']:.4f}  MR {r['MR']:.2f}")
    else:
        print(report_csv(pipe.report()), end="")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(argv)
    except UncGateError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
