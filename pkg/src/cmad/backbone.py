"""Multi-level feature extraction and tokenization.

Two extractors sit behind one interface: a frozen fixed-seed convolutional
stand-in (default; no downloads needed) and an adapter over a pretrained
torchvision EfficientNet-B4 loaded from a local weights file. Either way the
tapped levels concatenate to 272 channels on a 14x14 grid before projection
to 256-wide tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import BackboneConfig
from .errors import ConfigError, ShapeError

GRID = 14
N_TOKENS = GRID * GRID
D_MODEL = 256
FUSED_CHANNELS = 272


@dataclass
class FeatureStack:
    """Per-level feature maps of one image, coarsest last."""

    levels: list[torch.Tensor]  # each (C_l, H_l, W_l)
    source: str = "standin"


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (N_TOKENS, D_MODEL)
    grid: tuple[int, int] = (GRID, GRID)
    d_model: int = D_MODEL


def as_token_tensor(x) -> torch.Tensor:
    return x.tokens if isinstance(x, TokenSequence) else x


class StandinExtractor(nn.Module):
    """Frozen conv pyramid: four stride-2 3x3 convs, levels tapped before the
    activation so a zero image maps to exactly-zero level outputs."""

    kind = "standin"

    def __init__(self, level_channels: tuple[int, ...] = (24, 56, 192), weights_seed: int = 710):
        super().__init__()
        if len(level_channels) != 3:
            raise ConfigError("stand-in extractor expects exactly 3 level channel counts")
        if sum(level_channels) != FUSED_CHANNELS:
            raise ConfigError(
                f"level channel counts must sum to {FUSED_CHANNELS}, got {sum(level_channels)}"
            )
        self.level_channel_counts = list(level_channels)
        self.weights_ref = f"standin:{weights_seed}"
        gen = torch.Generator().manual_seed(weights_seed)
        widths = [3, 12, *level_channels]
        for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:])):
            w = torch.randn(cout, cin, 3, 3, generator=gen) * math.sqrt(2.0 / (cin * 9))
            self.register_buffer(f"conv{i}", w)
        self.n_stages = len(widths) - 1

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        h = x
        for i in range(self.n_stages):
            pre = F.conv2d(h, getattr(self, f"conv{i}"), stride=2, padding=1)
            if i >= 1:
                taps.append(pre)
            h = F.relu(pre)
        return taps


class PretrainedExtractor(nn.Module):
    """Adapter over torchvision's EfficientNet-B4, taps configured stages.

    Needs a local state-dict file; pretrained weights are never downloaded.
    """

    kind = "pretrained"

    def __init__(
        self,
        weights_path: str,
        stages: tuple[int, ...] = (2, 4, 6),
        expected_channels: int = FUSED_CHANNELS,
    ):
        super().__init__()
        if weights_path is None:
            raise ConfigError(
                "backbone.kind='pretrained' requires backbone.weights_path "
                "(a local EfficientNet-B4 state-dict file)"
            )
        try:
            from torchvision.models import efficientnet_b4
        except ImportError as exc:  # pragma: no cover
            raise ConfigError("pretrained backbone requires torchvision") from exc
        net = efficientnet_b4(weights=None)
        state = torch.load(weights_path, map_location="cpu")
        net.load_state_dict(state)
        self.stages = tuple(stages)
        self.features = net.features[: max(stages) + 1]
        self.features.eval()
        for p in self.features.parameters():
            p.requires_grad_(False)
        self.weights_ref = str(weights_path)
        with torch.no_grad():
            taps = self.forward(torch.zeros(1, 3, 224, 224))
        self.level_channel_counts = [int(t.shape[1]) for t in taps]
        if sum(self.level_channel_counts) != expected_channels:
            raise ConfigError(
                f"tapped stages {stages} yield {self.level_channel_counts} channels "
                f"(sum {sum(self.level_channel_counts)}), expected {expected_channels}"
            )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        h = x
        for i, block in enumerate(self.features):
            h = block(h)
            if i in self.stages:
                taps.append(h)
        return taps


def make_extractor(cfg: BackboneConfig) -> nn.Module:
    if cfg.kind == "standin":
        return StandinExtractor(tuple(cfg.level_channels), cfg.weights_seed)
    if cfg.kind == "pretrained":
        return PretrainedExtractor(cfg.weights_path, tuple(cfg.pretrained_stages))
    raise ConfigError(f"unknown backbone.kind {cfg.kind!r}")


def _image_to_tensor(image) -> torch.Tensor:
    pixels = getattr(image, "pixels", image)
    if isinstance(pixels, np.ndarray):
        pixels = torch.from_numpy(np.ascontiguousarray(pixels))
    if pixels.ndim != 3 or pixels.shape != (224, 224, 3):
        raise ShapeError(f"expected a 224x224x3 image, got {tuple(pixels.shape)}")
    return pixels.permute(2, 0, 1).unsqueeze(0).float()


def extract_features(extractor: nn.Module, image) -> FeatureStack:
    """Run the frozen extractor on one image (ImageSample or HxWx3 array)."""
    x = _image_to_tensor(image)
    with torch.no_grad():
        taps = extractor(x)
    return FeatureStack(levels=[t[0] for t in taps], source=extractor.kind)


def fuse_levels(stack: FeatureStack) -> torch.Tensor:
    """Bilinearly resize every level to the 14x14 grid and concatenate along
    channels in level order; output (272, 14, 14)."""
    levels = stack.levels if isinstance(stack, FeatureStack) else stack
    if len(levels) < 2:
        raise ConfigError("feature stack needs at least two levels")
    total = sum(int(lv.shape[-3]) for lv in levels)
    if total != FUSED_CHANNELS:
        raise ConfigError(f"level channels sum to {total}, expected {FUSED_CHANNELS}")
    batched = levels[0].ndim == 4
    resized = []
    for lv in levels:
        t = lv if batched else lv.unsqueeze(0)
        resized.append(F.interpolate(t, size=(GRID, GRID), mode="bilinear", align_corners=False))
    fused = torch.cat(resized, dim=1)
    return fused if batched else fused[0]


class Tokenizer(nn.Module):
    """Flatten the fused grid row-major and project 272 -> 256, plus learned
    positional embeddings (token i*14+j covers grid cell (i, j))."""

    def __init__(self, generator: torch.Generator | None = None):
        super().__init__()
        self.proj = nn.Linear(FUSED_CHANNELS, D_MODEL)
        self.pos = nn.Parameter(torch.empty(N_TOKENS, D_MODEL))
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        with torch.no_grad():
            w = torch.randn(self.proj.weight.shape, generator=generator)
            self.proj.weight.copy_(w / math.sqrt(FUSED_CHANNELS))
            self.proj.bias.zero_()
            self.pos.copy_(torch.randn(self.pos.shape, generator=generator) * 0.02)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        single = fused.ndim == 3
        if single:
            fused = fused.unsqueeze(0)
        if fused.shape[1:] != (FUSED_CHANNELS, GRID, GRID):
            raise ShapeError(f"expected (*, 272, 14, 14), got {tuple(fused.shape)}")
        x = fused.contiguous().flatten(2).transpose(1, 2)  # (B, 196, 272)
        tokens = self.proj(x) + self.pos
        return tokens[0] if single else tokens


def tokenize(fused: torch.Tensor, projector: Tokenizer) -> TokenSequence:
    """Public single-image tokenization; see :class:`Tokenizer` for batches."""
    return TokenSequence(tokens=projector(fused))
