"""Video backbone registry.

Each entry builds a 3D feature extractor with its final classification
layer removed, so the forward pass yields the latent embedding. Real
torchvision backbones are constructed lazily; ``tiny3d`` is a small
built-in network for tests and smoke runs. Without a weights file the
model keeps its (seeded) random initialization, which is reproducible but
will not match any published accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import torch
from torch import nn

KINETICS_MEAN = (0.43216, 0.394666, 0.37645)
KINETICS_STD = (0.22803, 0.22145, 0.216989)


class Tiny3D(nn.Module):
    """Two 3D conv blocks and a global pool; 32-channel features."""

    def __init__(self) -> None:
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv3d(3, 16, kernel_size=3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv3d(16, 32, kernel_size=3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool3d(1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x).flatten(1)


def _strip(model: nn.Module, attr: str) -> nn.Module:
    setattr(model, attr, nn.Identity())
    return model


def _video_model(ctor_name: str, head_attr: str) -> Callable[[], nn.Module]:
    def build() -> nn.Module:
        from torchvision.models import video as tv_video

        return _strip(getattr(tv_video, ctor_name)(weights=None), head_attr)

    return build


# name -> (constructor, input size, normalization mean/std)
_REGISTRY: Dict[str, Tuple[Callable[[], nn.Module], int, tuple, tuple]] = {
    "tiny3d": (Tiny3D, 32, (0.5, 0.5, 0.5), (0.5, 0.5, 0.5)),
    "r3d_18": (_video_model("r3d_18", "fc"), 112, KINETICS_MEAN, KINETICS_STD),
    "mc3_18": (_video_model("mc3_18", "fc"), 112, KINETICS_MEAN, KINETICS_STD),
    "r2plus1d_18": (_video_model("r2plus1d_18", "fc"), 112, KINETICS_MEAN, KINETICS_STD),
    "swin3d_t": (_video_model("swin3d_t", "head"), 224, KINETICS_MEAN, KINETICS_STD),
    "swin3d_b": (_video_model("swin3d_b", "head"), 224, KINETICS_MEAN, KINETICS_STD),
}


@dataclass
class Backbone:
    name: str
    model: nn.Module
    input_size: int
    mean: tuple
    std: tuple
    dim: int

    @torch.no_grad()
    def extract(self, clips: torch.Tensor) -> torch.Tensor:
        """(n, C, T, H, W) float clips -> (n, dim) features."""
        return self.model(clips)


def available_backbones() -> list:
    return sorted(_REGISTRY)


def load_backbone(
    name: str, weights: Optional[Path] = None, init_seed: int = 0
) -> Backbone:
    if name not in _REGISTRY:
        raise ValueError(f"unknown backbone {name!r}; choose from {available_backbones()}")
    builder, size, mean, std = _REGISTRY[name]
    torch.manual_seed(init_seed)  # reproducible random init when unweighted
    model = builder()
    if weights is not None:
        state = torch.load(weights, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    model.eval()
    with torch.no_grad():
        probe = torch.zeros(1, 3, 4, size, size)
        dim = int(model(probe).shape[-1])
    return Backbone(name=name, model=model, input_size=size, mean=mean, std=std, dim=dim)
