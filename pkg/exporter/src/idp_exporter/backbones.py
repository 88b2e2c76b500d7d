"""Backbone registry: anything that maps an image batch to a spatial
feature map (B, D, H', W').

Backbones are built deterministically: random-initialized weights always
come from a fixed torch seed, so repeated exports of the same folder are
byte-identical.  A user-supplied checkpoint can be loaded over either
architecture.
"""

from __future__ import annotations

import torch
from torch import nn

_SEED = 0x1D9


class TinyConvNet(nn.Module):
    """Five stride-2 conv blocks: resolution / 32 spatial grid, 32 channels.

    Not pretrained; a deterministic stand-in used for contract tests and
    pipelines where a real checkpoint is supplied separately.
    """

    def __init__(self):
        super().__init__()
        widths = [3, 8, 16, 16, 32, 32]
        blocks = []
        for cin, cout in zip(widths, widths[1:]):
            blocks += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.ReLU()]
        self.features = nn.Sequential(*blocks)

    def forward(self, x):
        return self.features(x)


def _resnet18_features():
    from torchvision.models import resnet18

    net = resnet18(weights=None)
    return nn.Sequential(
        net.conv1, net.bn1, net.relu, net.maxpool,
        net.layer1, net.layer2, net.layer3, net.layer4,
    )


_REGISTRY = {
    "tiny": TinyConvNet,
    "resnet18": _resnet18_features,
}


def available() -> list[str]:
    return sorted(_REGISTRY)


def build(name: str, weights_path: str | None = None) -> nn.Module:
    """Instantiate a backbone in eval mode on CPU, deterministically."""
    if name not in _REGISTRY:
        raise KeyError(f"unknown backbone {name!r}; available: {available()}")
    torch.manual_seed(_SEED)
    net = _REGISTRY[name]()
    if weights_path is not None:
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
    net.eval()
    return net
