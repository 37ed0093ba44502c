"""Command line: train an adapter on an emitted dataset directory, or
serve a checkpoint over the completion scoring protocol."""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional

from .train import ManifestMismatch, train_adapter


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="finetune-adapter")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train adapter weights on a dataset")
    p.add_argument("--data", required=True,
                   help="emitted dataset directory (manifest + JSONL files)")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None,
                   help="override the sidecar epoch count")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)

    p = sub.add_parser("serve", help="serve a checkpoint for scoring")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            overrides = {k: v for k, v in
                         (("epochs", args.epochs), ("lr", args.lr),
                          ("batch_size", args.batch_size)) if v is not None}
            run = train_adapter(args.data, args.out, seed=args.seed,
                                **overrides)
            print(json.dumps({
                "checkpoint": str(run.checkpoint_path),
                "hyperparams": run.hyperparams,
                "epoch_losses": run.epoch_losses,
            }, indent=2))
            return 0
        from .server import serve
        serve(args.checkpoint, host=args.host, port=args.port)
        return 0
    except (ManifestMismatch, FileNotFoundError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
