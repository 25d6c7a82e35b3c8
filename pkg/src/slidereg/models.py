"""Build and export truncated-backbone model files.

The registration features come from the first thirteen 3x3 conv layers of a
VGG-16-style network, tapped after its third, fourth, and fifth max-pooling
stages. Model files are TorchScript archives whose forward returns a dict
with keys ``pool3``, ``pool4``, ``pool5`` for an NCHW float32 input.

Two builders are provided: a seeded random-weight fixture (same topology,
He-initialized) used by the test suite and demos, and an exporter that
copies ImageNet-pretrained weights (downloads them on first use).
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict

import torch
from torch import nn

POOL_NAMES = ("pool3", "pool4", "pool5")

# channel widths between poolings, VGG-16 layout
_BLOCK3_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M"]
_BLOCK4_CFG = [512, 512, 512, "M"]
_BLOCK5_CFG = [512, 512, 512, "M"]


def _make_block(cfg: list, in_channels: int) -> tuple[nn.Sequential, int]:
    layers: list[nn.Module] = []
    for item in cfg:
        if item == "M":
            layers.append(nn.MaxPool2d(kernel_size=2, stride=2))
        else:
            layers.append(nn.Conv2d(in_channels, item, kernel_size=3, padding=1))
            layers.append(nn.ReLU(inplace=True))
            in_channels = item
    return nn.Sequential(*layers), in_channels


class TruncatedBackbone(nn.Module):
    """Conv stack through five poolings, emitting the last three pool maps."""

    def __init__(self):
        super().__init__()
        self.block3, c = _make_block(_BLOCK3_CFG, 3)
        self.block4, c = _make_block(_BLOCK4_CFG, c)
        self.block5, _ = _make_block(_BLOCK5_CFG, c)

    def forward(self, x: torch.Tensor) -> Dict[str, torch.Tensor]:
        p3 = self.block3(x)
        p4 = self.block4(p3)
        p5 = self.block5(p4)
        return {"pool3": p3, "pool4": p4, "pool5": p5}


def build_random_backbone(seed: int = 0) -> TruncatedBackbone:
    """Topology-faithful fixture with seeded He-initialized weights."""
    torch.manual_seed(seed)
    model = TruncatedBackbone()
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            nn.init.zeros_(m.bias)
    return model.eval()


def save_backbone(model: TruncatedBackbone, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scripted = torch.jit.script(model.eval())
    torch.jit.save(scripted, str(path))
    return path


def make_fixture_model(path: str | Path, seed: int = 0) -> Path:
    """Write a seeded random-weight model file (for tests and demos)."""
    return save_backbone(build_random_backbone(seed), path)


def export_pretrained_backbone(path: str | Path) -> Path:
    """Write a model file carrying ImageNet-pretrained weights.

    Downloads the published VGG-16 checkpoint via torchvision on first use;
    requires network access (or a warm torchvision cache).
    """
    from torchvision.models import VGG16_Weights, vgg16

    source = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features.eval()
    model = TruncatedBackbone()
    own = list(model.block3) + list(model.block4) + list(model.block5)
    for mine, theirs in zip(own, source):
        if isinstance(mine, nn.Conv2d):
            mine.weight.data.copy_(theirs.weight.data)
            mine.bias.data.copy_(theirs.bias.data)
    return save_backbone(model, path)
