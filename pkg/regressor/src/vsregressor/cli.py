"""Command-line interface: `train --config PATH` and `serve --model DIR --port N`."""

from __future__ import annotations

import argparse
import sys

from vsregressor.model import load_model
from vsregressor.serve import RegressorServer
from vsregressor.train import TrainConfig, train


def cmd_train(args) -> int:
    try:
        cfg = TrainConfig.from_file(args.config)
    except (OSError, ValueError, KeyError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    result = train(cfg)
    report = result.report
    print(
        f"trained {report['backbone']} for {len(report['epochs'])} epochs: "
        f"val loss {report['final_val_loss']:.5f} "
        f"({report['final_val_translation_error_m'] * 1000:.2f} mm, "
        f"{report['final_val_rotation_error_deg']:.2f} deg)"
    )
    if cfg.out_dir:
        print(f"model saved to {cfg.out_dir}")
    return 0


def cmd_serve(args) -> int:
    try:
        model = load_model(args.model)
    except (OSError, KeyError, ValueError) as e:
        print(f"error: cannot load model: {e}", file=sys.stderr)
        return 2
    try:
        server = RegressorServer(model, port=args.port)
    except OSError as e:
        print(f"error: cannot bind port {args.port}: {e}", file=sys.stderr)
        return 3
    print(f"serving pose estimates on port {server.port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="vsregressor", description="6-DOF pose regressor")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train on a dataset manifest")
    p_train.add_argument("--config", required=True, help="train config JSON")
    p_train.set_defaults(func=cmd_train)

    p_serve = sub.add_parser("serve", help="serve a trained model")
    p_serve.add_argument("--model", required=True, help="model directory")
    p_serve.add_argument("--port", type=int, default=0)
    p_serve.set_defaults(func=cmd_serve)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
