"""Bridge command line: finetune a model, then serve it.

    lm-bridge finetune --base-model <name-or-path> --feature pitch --family gaussian \
        --train train.jsonl --val validation.jsonl --out bridge_model/
    lm-bridge serve --model bridge_model/ --port 7070
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import BridgeConfig
from .model import load_bridge, save_bridge
from .server import BridgeServer
from .training import finetune

log = logging.getLogger("lm_bridge")


def _build_parser():
    parser = argparse.ArgumentParser(prog="lm-bridge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    ft = sub.add_parser("finetune", help="finetune a masked LM with a parameter head")
    ft.add_argument("--base-model", required=True)
    ft.add_argument("--feature", required=True)
    ft.add_argument("--family", required=True)
    ft.add_argument("--train", required=True)
    ft.add_argument("--val", required=True)
    ft.add_argument("--out", required=True)
    ft.add_argument("--seed", type=int, default=0)
    ft.add_argument("--learning-rate", type=float, default=5e-5)
    ft.add_argument("--batch-size", type=int, default=16)
    ft.add_argument("--max-epochs", type=int, default=10)
    ft.add_argument("--patience", type=int, default=3)
    ft.add_argument("--span-lo", type=int, default=1)
    ft.add_argument("--span-hi", type=int, default=10)

    sv = sub.add_parser("serve", help="serve a finetuned bridge model")
    sv.add_argument("--model", required=True)
    sv.add_argument("--port", type=int, default=7070)
    sv.add_argument("--host", default="127.0.0.1")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    if args.command == "finetune":
        cfg = BridgeConfig(
            base_model=args.base_model,
            feature=args.feature,
            family=args.family,
            span_lo=args.span_lo,
            span_hi=args.span_hi,
            patience=args.patience,
            seed=args.seed,
            learning_rate=args.learning_rate,
            batch_size=args.batch_size,
            max_epochs=args.max_epochs,
        )
        model, tokenizer, train_log = finetune(cfg, args.train, args.val)
        save_bridge(args.out, model, tokenizer, cfg)
        log.info("saved to %s; best val CE %.4f at epoch %d",
                 args.out, train_log["best_val_ce"], train_log["best_epoch"])
        print(json.dumps(train_log))
        return 0
    if args.command == "serve":
        model, tokenizer, meta = load_bridge(args.model)
        server = BridgeServer(
            model, tokenizer, meta["feature"], meta["family"],
            max_subword_len=meta.get("max_subword_len", 128),
            host=args.host, port=args.port,
        )
        log.info("listening on %s:%d", server.host, server.port)
        server.serve_forever()
        return 0
    return 1


if __name__ == "__main__":
    sys.exit(main())
