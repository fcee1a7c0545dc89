"""Command line interface.

Commands: ingest, fit-prior, train, sweep, synth, report. Each takes a
config file; --seed/--out/--threads override the corresponding config keys.
Exit codes: 0 success, 1 usage or config error, 2 data validation error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .config import ConfigError, RunConfig, load_config
from .conditional import SupportError
from .corpus import CorpusError
from .density import KdeFitError
from .mi_sweep import SweepError
from .predictor import TrainingDivergedError
from .remote import RemoteError
from . import pipeline

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

log = logging.getLogger("ctxmi")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctxmi", description=__doc__)
    parser.add_argument("--config", required=True, help="path to the run configuration (YAML)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--threads", type=int, default=None, help="override the worker count")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", help="normalize and validate raw corpus files")
    sub.add_parser("fit-prior", help="fit the unconditional density per feature")
    sub.add_parser("train", help="train the window predictor per feature")
    sub.add_parser("sweep", help="evaluate the full (n, m) grid and reports")
    sub.add_parser("synth", help="generate a synthetic corpus from the config")
    sub.add_parser("report", help="rebuild reports (and plots) from sweep CSVs")
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg, seed=args.seed, train=dataclasses.replace(cfg.train, seed=args.seed)
        )
    if args.out is not None:
        from pathlib import Path

        cfg = dataclasses.replace(cfg, output_dir=Path(args.out))
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = dataclasses.replace(cfg, threads=args.threads)
    return cfg


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "ingest":
            summary = pipeline.run_ingest(cfg)
            log.info("ingested: %s", summary["splits"])
            if summary["zero_pause_fraction"] is not None:
                log.info("zero-pause fraction: %.4f", summary["zero_pause_fraction"])
        elif args.command == "synth":
            info = pipeline.run_synth(cfg)
            log.info("generated synthetic corpus: %s words", info["words"])
        elif args.command == "fit-prior":
            models = pipeline.run_fit_prior(cfg)
            for kind, model in models.items():
                log.info("%s: bandwidth=%.6g val_ll=%.4f", kind.value, model.bandwidth, model.val_loglik)
        elif args.command == "train":
            models = pipeline.run_train(cfg)
            for kind, model in models.items():
                log.info("%s: family=%s best_val_ce=%.4f", kind.value, model.family.value,
                         model.train_log["best_val_ce"])
        elif args.command == "sweep":
            grids = pipeline.run_sweep(cfg)
            for name, grid in grids.items():
                log.info("%s: %d cells, H(signal)=%.4f", name, len(grid.cells), grid.h_uncond.value)
        elif args.command == "report":
            written = pipeline.run_report(cfg)
            log.info("wrote %d report file(s)", len(written))
        return EXIT_OK
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_USAGE
    except (CorpusError, SweepError, SupportError, RemoteError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (TrainingDivergedError, KdeFitError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
