"""Locating and loading backbone weights.

Weights are consumed, never produced: the exporter looks for a local
ResNet-50 state dict and refuses to run without one, naming the expected
file.  MoCo checkpoints are accepted as-is (their query-encoder key
prefixes are stripped on load).
"""

from __future__ import annotations

import os
from pathlib import Path

import torch

BACKBONES = ("imagenet", "moco")
_ENV_DIR = "RFKEXPORT_WEIGHTS_DIR"


class MissingWeightsError(FileNotFoundError):
    pass


def default_weights_dir() -> Path:
    env = os.environ.get(_ENV_DIR)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "rfkexport"


def resolve_weights_path(backbone: str, explicit=None) -> Path:
    if explicit is not None:
        p = Path(explicit)
        if not p.is_file():
            raise MissingWeightsError(
                f"weights file not found: {p} (pass --weights with a valid "
                f"ResNet-50 state dict)")
        return p
    if backbone not in BACKBONES:
        raise ValueError(f"unknown backbone {backbone!r}; choose from {BACKBONES}")
    p = default_weights_dir() / f"{backbone}_resnet50.pt"
    if not p.is_file():
        raise MissingWeightsError(
            f"no pretrained weights for backbone '{backbone}': expected "
            f"{p}. Download a ResNet-50 checkpoint there (or set "
            f"{_ENV_DIR}, or pass --weights PATH). "
            f"scripts/fetch_weights.py can convert a torchvision checkpoint.")
    return p


_PREFIXES = ("module.encoder_q.", "encoder_q.", "module.", "backbone.")


def _strip_prefixes(state: dict) -> dict:
    out = {}
    for key, val in state.items():
        for pre in _PREFIXES:
            if key.startswith(pre):
                key = key[len(pre):]
                break
        out[key] = val
    return out


def load_state_dict(path: Path) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(blob, dict) and "state_dict" in blob:
        blob = blob["state_dict"]
    if not isinstance(blob, dict):
        raise ValueError(f"{path}: not a state dict")
    return _strip_prefixes(blob)


def save_random_weights(path, seed: int = 0) -> Path:
    """Write a deterministically random-initialized ResNet-50 state dict.

    Meant for tests and offline development; the export pipeline is
    identical no matter where the weights came from.
    """
    from torchvision.models import resnet50

    torch.manual_seed(seed)
    model = resnet50(weights=None)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    return path
