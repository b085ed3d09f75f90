"""rfk-export: dump multi-scale conv4 feature maps as RFKFEAT1 files."""

from __future__ import annotations

import argparse
import sys

from .export import DEFAULT_SCALES, export_path
from .weights import BACKBONES, MissingWeightsError


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rfk-export",
                                description="export ResNet-50 conv4 feature maps")
    p.add_argument("input", help="image file or directory of images")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--backbone", choices=BACKBONES, default="imagenet")
    p.add_argument("--weights", default=None,
                   help="explicit path to a ResNet-50 state dict")
    p.add_argument("--scales", default=",".join(str(s) for s in DEFAULT_SCALES),
                   help="comma-separated scale factors")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        scales = tuple(float(s) for s in args.scales.split(",") if s)
        if not scales or any(s <= 0 for s in scales):
            raise ValueError("scales must be positive numbers")
        written = export_path(args.input, args.out, backbone=args.backbone,
                              weights_path=args.weights, scales=scales)
    except MissingWeightsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
