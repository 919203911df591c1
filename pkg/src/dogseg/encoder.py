"""Shared convolutional feature extractor with multi-block fusion."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_BLOCKS = ((32, 2), (64, 2), (128, 2), (128, 1), (128, 1))
INPUT_NORMS = ("image", "none")


@dataclass
class EncoderConfig:
    input_size: tuple[int, int] = (64, 64)
    blocks: tuple[tuple[int, int], ...] = DEFAULT_BLOCKS
    fused_blocks: tuple[int, ...] = (2, 3, 4)
    embed_dim: int = 128
    freeze_norm_stats: bool = False
    input_norm: str = "image"

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.blocks = tuple((int(c), int(s)) for c, s in self.blocks)
        self.fused_blocks = tuple(sorted(set(int(i) for i in self.fused_blocks)))
        if not self.blocks:
            raise ValueError("encoder needs at least one block")
        if not self.fused_blocks:
            raise ValueError("fused_blocks must be non-empty")
        if any(i < 0 or i >= len(self.blocks) for i in self.fused_blocks):
            raise ValueError(f"fused_blocks {self.fused_blocks} out of range for {len(self.blocks)} blocks")
        if self.input_norm not in INPUT_NORMS:
            raise ValueError(f"input_norm must be one of {INPUT_NORMS}")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be positive")

    @property
    def deepest(self) -> int:
        return self.fused_blocks[-1]

    def block_sizes(self) -> list[tuple[int, int]]:
        h, w = self.input_size
        sizes = []
        for _, s in self.blocks:
            h, w = math.ceil(h / s), math.ceil(w / s)
            sizes.append((h, w))
        return sizes

    @property
    def feature_size(self) -> tuple[int, int]:
        return self.block_sizes()[self.deepest]


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class Encoder(nn.Module):
    """Small strided CNN; the selected blocks are fused into an M-channel map."""

    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        self.config = config or EncoderConfig()
        cfg = self.config
        stages = []
        cin = 3
        for cout, stride in cfg.blocks[: cfg.deepest + 1]:
            stages.append(ConvBlock(cin, cout, stride))
            cin = cout
        self.stages = nn.ModuleList(stages)
        fused_in = sum(cfg.blocks[i][0] for i in cfg.fused_blocks)
        self.project = nn.Conv2d(fused_in, cfg.embed_dim, 1)

    @property
    def fused_channels(self) -> int:
        return self.project.in_channels

    def train(self, mode: bool = True):
        super().train(mode)
        if mode and self.config.freeze_norm_stats:
            for m in self.modules():
                if isinstance(m, nn.BatchNorm2d):
                    m.eval()
        return self

    def block_outputs(self, images: torch.Tensor) -> list[torch.Tensor]:
        cfg = self.config
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.dim() != 4 or images.shape[1] != 3 or tuple(images.shape[-2:]) != cfg.input_size:
            raise ValueError(
                f"expected images of shape (B,3,{cfg.input_size[0]},{cfg.input_size[1]}), got {tuple(images.shape)}"
            )
        outs = []
        x = standardize_images(images) if cfg.input_norm == "image" else images
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        squeeze = images.dim() == 3
        outs = self.block_outputs(images)
        fused = fuse_blocks([outs[i] for i in self.config.fused_blocks], self.project)
        return fused.squeeze(0) if squeeze else fused


def standardize_images(images: torch.Tensor, eps: float = 1e-4) -> torch.Tensor:
    """Zero-mean, unit-variance per image and colour channel."""
    mean = images.mean(dim=(-2, -1), keepdim=True)
    var = images.var(dim=(-2, -1), keepdim=True, unbiased=False)
    return (images - mean) / torch.sqrt(var + eps)


def fuse_blocks(block_outputs: list[torch.Tensor], projection: nn.Conv2d) -> torch.Tensor:
    """Nearest-resize blocks to the last (deepest) one, concatenate, project 1x1."""
    if not block_outputs:
        raise ValueError("fuse_blocks needs at least one block output")
    target = block_outputs[-1].shape[-2:]
    resized = [b if b.shape[-2:] == target else F.interpolate(b, size=tuple(target), mode="nearest")
               for b in block_outputs]
    x = torch.cat(resized, dim=1)
    if x.shape[1] != projection.in_channels:
        raise ValueError(f"projection expects {projection.in_channels} channels, got {x.shape[1]}")
    return projection(x)
