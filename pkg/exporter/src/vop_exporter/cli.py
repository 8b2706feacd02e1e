"""Command line front end: vop-export export --images DIR --out FILE."""

from __future__ import annotations

import argparse
import json
import sys

import torch

from vop import ValidationError

from .backbone import DEFAULT_VARIANT, VARIANTS, load_backbone
from .export import export_directory


def _fail(code: int, message: str) -> int:
    print(json.dumps({"level": "error", "message": message}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="vop-export",
        description="export frozen ViT patch features to a vop feature file",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    exp = sub.add_parser("export", help="export every image under a directory")
    exp.add_argument("--images", required=True, help="image root directory")
    exp.add_argument("--out", required=True, help="output feature file")
    exp.add_argument("--batch", type=int, default=8, help="inference batch size")
    exp.add_argument(
        "--weights",
        default="seeded:0",
        help="state-dict path or seeded:<int> for the deterministic offline init",
    )
    exp.add_argument("--variant", default=DEFAULT_VARIANT, choices=sorted(VARIANTS))
    exp.add_argument(
        "--depth", type=int, default=None, help="override the variant's block count"
    )
    args = parser.parse_args(argv)

    # a fixed thread count keeps repeat exports bit-identical
    torch.set_num_threads(1)
    try:
        model = load_backbone(args.weights, args.variant, args.depth)
        report = export_directory(model, args.images, args.out, args.batch)
    except (ValueError, RuntimeError, ValidationError) as exc:
        return _fail(1, str(exc))
    except OSError as exc:
        return _fail(2, str(exc))
    print(json.dumps({"out": args.out, **report}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
