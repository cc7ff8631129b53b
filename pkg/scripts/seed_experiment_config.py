#!/usr/bin/env python3
"""Write the built-in experiment defaults as an editable JSON config document."""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Any, Dict

from dotenv import load_dotenv

ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from bup.artifacts import write_json_atomic  # noqa: E402
from bup.errors import ConfigError  # noqa: E402
from bup.cli import parse_seeds  # noqa: E402
from bup.experiment_config import build_config, compute_checksum, default_document  # noqa: E402


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Write a default bup experiment config.")
    parser.add_argument("--output", default="configs/default.json", help="Where to write the document.")
    parser.add_argument("--dataset", default=None, help="Dataset name to preset (cora, citeseer, ...).")
    parser.add_argument("--dataset-dir", default=os.getenv("BUP_DATASET_DIR"))
    parser.add_argument("--per-class", type=int, default=None)
    parser.add_argument("--seeds", default=None, help="Comma list or ranges, e.g. 0-9")
    parser.add_argument("--ood-class", type=int, default=None, help="Preset ood mode with this withheld class.")
    parser.add_argument("--force", action="store_true", help="Overwrite an existing file.")
    return parser.parse_args()


def main() -> int:
    load_dotenv(override=False)
    args = parse_args()
    output = Path(args.output)
    if output.exists() and not args.force:
        print(f"{output} already exists; pass --force to overwrite.", file=sys.stderr)
        return 1

    document: Dict[str, Dict[str, Any]] = default_document()
    if args.dataset:
        document["dataset"]["name"] = args.dataset
    if args.dataset_dir:
        document["dataset"]["dir"] = args.dataset_dir
    if args.per_class is not None:
        document["split"]["per_class"] = args.per_class
    if args.seeds:
        document["experiment"]["seeds"] = parse_seeds(args.seeds)
    if args.ood_class is not None:
        document["experiment"]["mode"] = "ood"
        document["experiment"]["ood_class"] = args.ood_class

    try:
        build_config(document)
    except ConfigError as exc:
        print(f"Invalid config: {exc}", file=sys.stderr)
        return 1
    write_json_atomic(output, document)
    print(f"Wrote {output}: checksum={compute_checksum(document)[:8]}...")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
