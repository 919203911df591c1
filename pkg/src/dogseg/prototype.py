"""Masked average pooling and scale-space representation (SSR) assembly."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class EmptyForegroundError(ValueError):
    """A mask that must contain foreground has none."""


def downsample_mask(mask, target: tuple[int, int]):
    """Nearest-neighbour subsample of a binary mask to ``target`` size.

    Accepts (H,W) or batched (...,H,W) arrays or tensors. Whenever the
    subsampled mask loses all foreground that the source had, the sample
    falls back to max-pooling over each target cell's source block.
    """
    as_numpy = isinstance(mask, np.ndarray)
    m = torch.as_tensor(mask)
    if m.dim() < 2:
        raise ValueError("mask must be at least 2-D")
    H, W = m.shape[-2:]
    h, w = int(target[0]), int(target[1])
    if h > H or w > W or h < 1 or w < 1:
        raise ValueError(f"cannot downsample mask of size {(H, W)} to {(h, w)}")
    lead = m.shape[:-2]
    m = (m.reshape(-1, H, W) > 0).to(torch.float32)
    rows = torch.div(torch.arange(h) * H, h, rounding_mode="floor")
    cols = torch.div(torch.arange(w) * W, w, rounding_mode="floor")
    out = m[:, rows][:, :, cols]
    lost = (out.flatten(1).sum(1) == 0) & (m.flatten(1).sum(1) > 0)
    if lost.any():
        pooled = F.adaptive_max_pool2d(m[lost].unsqueeze(1), (h, w)).squeeze(1)
        out[lost] = pooled
    out = out.reshape(*lead, h, w).to(torch.uint8)
    return out.numpy() if as_numpy else out


def masked_average_pool(features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean feature vector over foreground cells.

    features: (..., M, h, w); mask: (..., h, w) with values in {0, 1}.
    Returns (..., M).
    """
    if features.shape[-2:] != mask.shape[-2:] or features.shape[:-3] != mask.shape[:-2]:
        raise ValueError(f"feature shape {tuple(features.shape)} does not match mask {tuple(mask.shape)}")
    mask = mask.to(features.dtype)
    count = mask.sum(dim=(-2, -1))
    if (count == 0).any():
        raise EmptyForegroundError("masked_average_pool needs at least one foreground cell")
    total = (features * mask.unsqueeze(-3)).sum(dim=(-2, -1))
    return total / count.unsqueeze(-1)


@dataclass
class SSRSequence:
    steps: list[torch.Tensor]  # each (B, C, h, w)
    provenance: list[tuple[int, int]]  # (support index, level)

    def __len__(self) -> int:
        return len(self.steps)

    def reversed(self) -> "SSRSequence":
        return SSRSequence(self.steps[::-1], self.provenance[::-1])


COMBINE_MODES = ("hadamard", "dot")


def combine(prototype: torch.Tensor, query_features: torch.Tensor, mode: str = "hadamard") -> torch.Tensor:
    """Unpool (B, M) prototypes over the query grid and merge with (B, M, h, w) features."""
    if prototype.shape[-1] != query_features.shape[-3]:
        raise ValueError(f"prototype length {prototype.shape[-1]} != feature channels {query_features.shape[-3]}")
    psi = prototype[..., :, None, None]
    if mode == "hadamard":
        return psi * query_features
    if mode == "dot":
        return (psi * query_features).sum(dim=-3, keepdim=True)
    raise ValueError(f"unknown combine mode {mode!r}")


class SSRNorm(nn.Module):
    """One batch-norm per scale level, shared across supports."""

    def __init__(self, levels: int, channels: int):
        super().__init__()
        self.norms = nn.ModuleList(nn.BatchNorm2d(channels) for _ in range(levels))

    @property
    def levels(self) -> int:
        return len(self.norms)

    def forward(self, x: torch.Tensor, level: int) -> torch.Tensor:
        return self.norms[level](x)


def build_ssr(prototypes: torch.Tensor, query_features: torch.Tensor, norm: SSRNorm | None,
              combine_mode: str = "hadamard") -> SSRSequence:
    """Support-major, level-minor sequence of normalized prototype/query maps.

    prototypes: (B, k, L, M); query_features: (B, M, h, w). With ``norm`` set
    to None the raw combinations are returned.
    """
    if prototypes.dim() != 4:
        raise ValueError(f"prototypes must be (B, k, L, M), got {tuple(prototypes.shape)}")
    if query_features.dim() != 4 or prototypes.shape[0] != query_features.shape[0]:
        raise ValueError("query features must be (B, M, h, w) with matching batch")
    k, levels = prototypes.shape[1], prototypes.shape[2]
    if norm is not None and norm.levels != levels:
        raise ValueError(f"norm has {norm.levels} levels, prototypes have {levels}")
    steps, prov = [], []
    for s in range(k):
        for lvl in range(levels):
            x = combine(prototypes[:, s, lvl], query_features, combine_mode)
            if norm is not None:
                x = norm(x, lvl)
            steps.append(x)
            prov.append((s, lvl))
    return SSRSequence(steps, prov)
