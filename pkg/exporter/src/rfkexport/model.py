"""ResNet-50 trunk up to the conv4 stage (layer3 output, stride 16)."""

from __future__ import annotations

from pathlib import Path

import torch
from torch import nn
from torchvision.models import resnet50

from .weights import load_state_dict

CONV4_STRIDE = 16
CONV4_CHANNELS = 1024

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class Conv4Trunk(nn.Module):
    def __init__(self, weights_path: Path):
        super().__init__()
        full = resnet50(weights=None)
        state = load_state_dict(weights_path)
        missing, _unexpected = full.load_state_dict(state, strict=False)
        trunk_missing = [k for k in missing
                         if not k.startswith(("layer4", "fc"))]
        if trunk_missing:
            raise ValueError(
                f"{weights_path}: state dict lacks trunk parameters, e.g. "
                f"{trunk_missing[:3]}")
        self.stem = nn.Sequential(full.conv1, full.bn1, full.relu, full.maxpool)
        self.layer1 = full.layer1
        self.layer2 = full.layer2
        self.layer3 = full.layer3
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        x = self.layer1(x)
        x = self.layer2(x)
        return self.layer3(x)


_cache: dict[str, Conv4Trunk] = {}


def get_trunk(weights_path) -> Conv4Trunk:
    key = str(Path(weights_path).resolve())
    if key not in _cache:
        _cache[key] = Conv4Trunk(Path(weights_path))
    return _cache[key]


def features_for(trunk: Conv4Trunk, rgb: torch.Tensor) -> torch.Tensor:
    """(3, H, W) image in [0, 1] -> (grid_h, grid_w, 1024) L2-normalized."""
    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    x = ((rgb - mean) / std).unsqueeze(0)
    with torch.no_grad():
        feat = trunk(x)[0]  # (1024, gh, gw)
    feat = feat.permute(1, 2, 0).contiguous()
    norms = feat.norm(dim=2, keepdim=True)
    return torch.where(norms > 1e-12, feat / norms.clamp(min=1e-12),
                       torch.zeros_like(feat))
