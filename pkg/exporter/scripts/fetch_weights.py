#!/usr/bin/env python3
"""Fetch or convert ResNet-50 weights into the exporter's expected layout.

With --from-checkpoint PATH an existing state dict (torchvision format or
a MoCo checkpoint) is copied/normalized into place.  Without it the
torchvision ImageNet checkpoint is downloaded (needs network access).

The exporter looks for  <weights-dir>/{imagenet|moco}_resnet50.pt  where
weights-dir is $RFKEXPORT_WEIGHTS_DIR or ~/.cache/rfkexport.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import torch

from rfkexport.weights import default_weights_dir, load_state_dict


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--backbone", choices=("imagenet", "moco"), default="imagenet")
    ap.add_argument("--from-checkpoint", default=None,
                    help="existing checkpoint to normalize into place")
    ap.add_argument("--weights-dir", default=None)
    args = ap.parse_args()

    out_dir = Path(args.weights_dir) if args.weights_dir else default_weights_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    out = out_dir / f"{args.backbone}_resnet50.pt"

    if args.from_checkpoint:
        state = load_state_dict(Path(args.from_checkpoint))
        torch.save(state, out)
    else:
        if args.backbone != "imagenet":
            raise SystemExit("only the imagenet checkpoint can be auto-downloaded; "
                             "pass --from-checkpoint for moco")
        from torchvision.models import ResNet50_Weights, resnet50
        model = resnet50(weights=ResNet50_Weights.IMAGENET1K_V1)
        torch.save(model.state_dict(), out)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
