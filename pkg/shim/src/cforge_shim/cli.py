"""Serve the shim: ``cforge-shim --port 8099 --store /path/to/store``."""

from __future__ import annotations

import argparse
import json
import sys
import tempfile
from typing import Sequence

from .app import build_app
from .models import ShimConfig

CAPABILITIES = ("txt2img", "edit", "embed", "age", "attributes", "concepts")


def build_config(args: argparse.Namespace) -> ShimConfig:
    config = ShimConfig(
        store_dir=args.store or tempfile.mkdtemp(prefix="cforge-shim-"),
        embedding_dim=args.embedding_dim,
    )
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            overrides = json.load(fh)
        for capability, spec in overrides.get("capabilities", {}).items():
            if capability not in CAPABILITIES:
                raise SystemExit(f"unknown capability in config: {capability}")
            config.specs[capability] = spec
        config.embedding_dim = int(overrides.get("embedding-dim", config.embedding_dim))
    for capability in args.disable or ():
        if capability not in CAPABILITIES:
            raise SystemExit(f"unknown capability: {capability}")
        config.specs[capability] = None
    return config


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="cforge-shim", description="Wire-protocol model backend")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8099)
    parser.add_argument("--store", default=None, help="image store directory (default: temp dir)")
    parser.add_argument("--config", default=None, help="JSON file mapping capabilities to model specs")
    parser.add_argument("--embedding-dim", type=int, default=768)
    parser.add_argument(
        "--disable", action="append", metavar="CAPABILITY", help="serve without this capability"
    )
    args = parser.parse_args(argv)

    import uvicorn

    app = build_app(build_config(args))
    print(f"cforge-shim serving on http://{args.host}:{args.port}", file=sys.stderr)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


if __name__ == "__main__":
    sys.exit(main())
