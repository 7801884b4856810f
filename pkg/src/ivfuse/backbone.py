"""Frozen five-level feature extractors for the contrastive feature space.

Both extractors return a list of five feature maps, one per spatial scale,
with level ``i + 1`` at half (rounded up) the resolution of level ``i``:

* :class:`VGG19Backbone` taps relu1_1, relu2_1, relu3_1, relu4_1, relu5_1 of
  a VGG19 loaded from a local weights file.
* :class:`TestBackbone` is a fixed-seed strided conv stack with the same
  contract, so nothing needs to be downloaded.

Inputs are single- or three-channel images in [0, 1]; single channel inputs
are replicated and ImageNet mean/std normalization is applied internally.
"""

from __future__ import annotations

import logging
import os

import torch
from torch import nn

from .errors import ConfigError, ImageTooSmallError

log = logging.getLogger(__name__)

NUM_LEVELS = 5
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
VGG19_TAPS = (1, 6, 11, 20, 29)  # relu{1..5}_1 in torchvision's vgg19().features


class FrozenBackbone(nn.Module):
    min_size = 1

    def __init__(self):
        super().__init__()
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        return super().train(False)

    def train(self, mode: bool = True):
        # always evaluation mode
        return super().train(False)

    def _normalize(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4:
            raise ValueError(f"expected (B, C, H, W), got {tuple(x.shape)}")
        if min(x.shape[-2:]) < self.min_size:
            raise ImageTooSmallError(
                f"{type(self).__name__} needs >= {self.min_size}px, got {tuple(x.shape[-2:])}")
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        return (x - self.mean) / self.std

    def _features(self, x: torch.Tensor) -> list[torch.Tensor]:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return self._features(self._normalize(x))


class TestBackbone(FrozenBackbone):
    """Five 3x3 conv + ReLU stages; stage 1 has stride 1, the rest stride 2."""

    __test__ = False  # not a pytest class

    def __init__(self, channels=(8, 16, 32, 32, 32), seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        stages = []
        c_in = 3
        for i, c_out in enumerate(channels):
            conv = nn.Conv2d(c_in, c_out, 3, stride=1 if i == 0 else 2, padding=1)
            bound = (6.0 / (c_in * 9)) ** 0.5
            with torch.no_grad():
                conv.weight.uniform_(-bound, bound, generator=gen)
                conv.bias.zero_()
            stages.append(nn.Sequential(conv, nn.ReLU()))
            c_in = c_out
        self.stages = nn.ModuleList(stages)
        self.freeze()

    def _features(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class VGG19Backbone(FrozenBackbone):
    min_size = 32

    def __init__(self, weights_path: str):
        super().__init__()
        from torchvision.models import vgg19

        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        if any(k.startswith("features.") for k in state):
            state = {k[len("features."):]: v for k, v in state.items()
                     if k.startswith("features.")}
        features = vgg19(weights=None).features
        features.load_state_dict(state)
        layers = list(features.children())[: VGG19_TAPS[-1] + 1]
        for layer in layers:
            if isinstance(layer, nn.MaxPool2d):
                layer.ceil_mode = True
        self.layers = nn.ModuleList(layers)
        self.freeze()

    def _features(self, x):
        feats = []
        for idx, layer in enumerate(self.layers):
            x = layer(x)
            if idx in VGG19_TAPS:
                feats.append(x)
        return feats


def load_backbone(weights_path: str | None = None, *, seed: int = 0,
                  dtype: torch.dtype = torch.float32):
    """Return ``(backbone, info)``; ``info`` goes into the run manifest.

    A missing or unset weights file selects :class:`TestBackbone`.
    """
    if weights_path and os.path.isfile(weights_path):
        try:
            backbone = VGG19Backbone(weights_path)
        except (RuntimeError, KeyError) as exc:
            raise ConfigError(f"cannot load VGG19 weights from {weights_path}: {exc}") from exc
        info = {"backbone": "vgg19", "weights": weights_path}
    else:
        backbone = TestBackbone(seed=seed)
        reason = "no weights path configured" if not weights_path else "weights file not found"
        info = {"backbone": "test", "weights": weights_path, "seed": seed, "reason": reason}
        log.info("using test backbone (%s)", reason)
    return backbone.to(dtype), info


def extract(image: torch.Tensor, backbone: FrozenBackbone) -> list[torch.Tensor]:
    """Five-level feature pyramid of ``image`` (B, 1|3, H, W)."""
    feats = backbone(image)
    if len(feats) != NUM_LEVELS:
        raise RuntimeError(f"backbone returned {len(feats)} levels, expected {NUM_LEVELS}")
    return feats
