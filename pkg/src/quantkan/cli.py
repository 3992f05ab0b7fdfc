"""Command-line client for the quantkan service.

The CLI is a thin client: it turns flags into a request, posts it to the
service (in-process by default, or a remote server via ``--server``), and
prints the returned table. ``quantkan serve`` starts the HTTP server.

Grammar:
    quantkan <train|qat|ptq|eval|sweep-bits|sweep-grid>
             [--model M] [--dataset D] [--method A] [--bits wXaY]
             [--grid G] [--order K] [--calib N] [--seed S]
             [--config FILE] [--out DIR] [--server URL] ...
    quantkan serve [--host H] [--port P]
"""

from __future__ import annotations

import argparse
import sys

from .errors import ParseError
from .experiments import COMMANDS
from .quantizers import parse_bit_config

CONFIG_KEYS = {
    "model": str, "dataset": str, "method": str, "bits": str, "grid": int,
    "order": int, "calib": int, "seed": int, "out": str, "epochs": int,
    "batch_size": int, "learning_rate": float, "optimizer": str,
    "lr_schedule": str, "hidden": int, "data_root": str,
    "act_observer": str, "ptq_iters": int,
}

DEFAULTS = {
    "model": "kan_mlp", "dataset": "mnist", "method": "lsq", "bits": "w4a4",
    "grid": 5, "order": 3, "calib": 512, "seed": 0, "out": "runs",
    "epochs": 10, "batch_size": 64, "learning_rate": 1e-3,
    "optimizer": "adam", "lr_schedule": "cosine", "hidden": 64,
    "data_root": None, "act_observer": "minmax", "ptq_iters": 800,
}


def _experiment_flags(sub: argparse.ArgumentParser):
    # defaults stay None so config-file values can be overridden by flags
    sub.add_argument("--model")
    sub.add_argument("--dataset")
    sub.add_argument("--method")
    sub.add_argument("--bits")
    sub.add_argument("--grid", type=int)
    sub.add_argument("--order", type=int)
    sub.add_argument("--calib", type=int)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--out")
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--batch-size", dest="batch_size", type=int)
    sub.add_argument("--learning-rate", dest="learning_rate", type=float)
    sub.add_argument("--optimizer")
    sub.add_argument("--lr-schedule", dest="lr_schedule")
    sub.add_argument("--hidden", type=int)
    sub.add_argument("--data-root", dest="data_root")
    sub.add_argument("--act-observer", dest="act_observer")
    sub.add_argument("--ptq-iters", dest="ptq_iters", type=int)
    sub.add_argument("--config", help="key=value file; flags win over it")
    sub.add_argument("--server", help="URL of a running quantkan server; "
                                      "default runs in-process")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quantkan")
    subs = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        sub = subs.add_parser(command)
        _experiment_flags(sub)
        if command == "sweep-bits":
            sub.add_argument("--tokens", nargs="+")
        if command == "sweep-grid":
            sub.add_argument("--grids", nargs="+", type=int)
    serve = subs.add_parser("serve")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def read_config_file(path: str) -> dict:
    """Simple key=value lines; '#' starts a comment."""
    values = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{lineno}: expected key=value, "
                                 f"got {line!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in CONFIG_KEYS:
                raise ParseError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                values[key] = CONFIG_KEYS[key](value)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad value for {key}: "
                                 f"{value!r}")
    return values


def parse_cli(argv: list[str]) -> argparse.Namespace:
    """Parse flags, merge the optional config file underneath them, and
    validate the bit token early so bad tokens are usage errors."""
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        return args
    merged = dict(DEFAULTS)
    if getattr(args, "config", None):
        merged.update(read_config_file(args.config))
    for key in CONFIG_KEYS:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            merged[key] = flag_value
    for key, value in merged.items():
        setattr(args, key, value)
    parse_bit_config(args.bits)
    return args


def _request_payload(args: argparse.Namespace) -> dict:
    payload = {key: getattr(args, key) for key in CONFIG_KEYS}
    if getattr(args, "tokens", None) is not None:
        payload["tokens"] = args.tokens
    if getattr(args, "grids", None) is not None:
        payload["grids"] = args.grids
    return payload


def _post(args: argparse.Namespace) -> dict:
    endpoint = "/" + args.command
    payload = _request_payload(args)
    if args.server:
        import httpx

        with httpx.Client(base_url=args.server, timeout=None) as client:
            response = client.post(endpoint, json=payload)
    else:
        from fastapi.testclient import TestClient

        from .service import app

        with TestClient(app) as client:
            response = client.post(endpoint, json=payload)
    if response.status_code != 200:
        try:
            detail = response.json().get("detail", response.text)
        except Exception:
            detail = response.text
        raise SystemExit(f"error ({response.status_code}): {detail}")
    return response.json()


def _print_table(result: dict):
    print(f"{'architecture':<14}{'method':<10}{'bits':<8}{'grid':<6}"
          f"{'accuracy':<10}{'status'}")
    for row in result["rows"]:
        acc = f"{row['accuracy']:.2f}" if row["accuracy"] is not None else "-"
        print(f"{row['architecture']:<14}{row['method']:<10}{row['bits']:<8}"
              f"{row['grid']:<6}{acc:<10}{row['status']}")
    print(f"reports: {result['csv_path']} {result['md_path']}")


def main(argv: list[str] | None = None) -> int:
    argv = argv if argv is not None else sys.argv[1:]
    try:
        args = parse_cli(argv)
    except ParseError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    if args.command == "serve":
        import uvicorn

        from .service import app

        uvicorn.run(app, host=args.host, port=args.port)
        return 0
    try:
        result = _post(args)
    except SystemExit as exc:
        print(exc, file=sys.stderr)
        return 1
    _print_table(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
