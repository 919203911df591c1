"""Difference-of-Gaussians scale space over feature maps.

Every blur is applied channel-wise with reflect padding, so each normalized
Gaussian preserves constant maps and every DoG level annihilates them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class GaussianKernel:
    sigma: float
    radius: int
    weights: np.ndarray  # (2r+1, 2r+1), sums to 1

    @property
    def size(self) -> int:
        return 2 * self.radius + 1

    def center(self) -> float:
        return float(self.weights[self.radius, self.radius])


def default_radius(sigma: float) -> int:
    return max(1, math.ceil(3.0 * sigma))


def gaussian_kernel(sigma: float, radius: int | None = None) -> GaussianKernel:
    """Sampled 2-D Gaussian on the integer grid [-radius, radius]^2, renormalized."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if radius is None:
        radius = default_radius(sigma)
    if int(radius) != radius or radius < 1:
        raise ValueError(f"radius must be a positive integer, got {radius}")
    radius = int(radius)
    g = _gaussian_1d(sigma, radius)
    weights = np.outer(g, g)
    weights /= weights.sum()
    return GaussianKernel(sigma=float(sigma), radius=radius, weights=weights)


def _gaussian_1d(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


@dataclass(frozen=True)
class ScaleSchedule:
    """Increasing blur widths; level ``l`` is the DoG between sigmas l and l+1."""

    sigmas: tuple[float, ...]

    def __post_init__(self):
        sigmas = tuple(float(s) for s in self.sigmas)
        object.__setattr__(self, "sigmas", sigmas)
        if len(sigmas) < 2:
            raise ValueError("a schedule needs at least two sigmas")
        if any(s <= 0 for s in sigmas):
            raise ValueError("sigmas must be positive")
        if any(b <= a for a, b in zip(sigmas, sigmas[1:])):
            raise ValueError("sigmas must be strictly increasing")

    @property
    def levels(self) -> int:
        return len(self.sigmas) - 1

    def pairs(self) -> list[tuple[float, float]]:
        return list(zip(self.sigmas, self.sigmas[1:]))

    @classmethod
    def geometric(cls, sigma0: float = 1.0, ratio: float = math.sqrt(2.0), levels: int = 4) -> "ScaleSchedule":
        if levels < 1:
            raise ValueError("levels must be >= 1")
        return cls(tuple(sigma0 * ratio**i for i in range(levels + 1)))

    @classmethod
    def single(cls, sigma0: float = 1.0, ratio: float = math.sqrt(2.0), span: int = 4) -> "ScaleSchedule":
        """One DoG spanning the outermost sigmas of a geometric schedule."""
        return cls((sigma0, sigma0 * ratio**span))


DEFAULT_SCHEDULE = ScaleSchedule.geometric()


def reflect_indices(n: int, pad: int) -> torch.Tensor:
    """Source indices for reflect padding of any width (edge sample not repeated).

    Unlike ``F.pad(mode="reflect")`` this works when ``pad >= n`` by mirroring
    periodically, which matters for wide kernels on small feature grids.
    """
    idx = torch.arange(-pad, n + pad)
    if n == 1:
        return torch.zeros_like(idx)
    period = 2 * (n - 1)
    idx = torch.remainder(idx, period)
    return torch.where(idx >= n, period - idx, idx)


def reflect_pad(x: torch.Tensor, pad: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    x = x.index_select(-2, reflect_indices(h, pad).to(x.device))
    return x.index_select(-1, reflect_indices(w, pad).to(x.device))


def _as_batched(features: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if features.dim() == 3:
        return features.unsqueeze(0), True
    if features.dim() == 4:
        return features, False
    raise ValueError(f"expected (M,H,W) or (B,M,H,W) features, got shape {tuple(features.shape)}")


def gaussian_blur(features: torch.Tensor, sigma: float, radius: int | None = None) -> torch.Tensor:
    """Channel-wise separable Gaussian blur with reflect padding."""
    x, squeezed = _as_batched(features)
    if x.shape[-1] == 0 or x.shape[-2] == 0:
        raise ValueError("features have empty spatial dims")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = default_radius(sigma) if radius is None else radius
    g = torch.as_tensor(_gaussian_1d(sigma, r), dtype=x.dtype, device=x.device)
    c = x.shape[1]
    xp = reflect_pad(x, r)
    out = F.conv2d(xp, g.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    out = F.conv2d(out, g.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    return out.squeeze(0) if squeezed else out


def dog_transform(features: torch.Tensor, sigma_lo: float, sigma_hi: float) -> torch.Tensor:
    """blur(features, sigma_hi) - blur(features, sigma_lo), per channel."""
    if not sigma_lo > 0:
        raise ValueError(f"sigma_lo must be positive, got {sigma_lo}")
    if not sigma_hi > sigma_lo:
        raise ValueError(f"need sigma_hi > sigma_lo, got {sigma_hi} <= {sigma_lo}")
    return gaussian_blur(features, sigma_hi) - gaussian_blur(features, sigma_lo)


def build_pyramid(features: torch.Tensor, schedule: ScaleSchedule = DEFAULT_SCHEDULE) -> list[torch.Tensor]:
    """DoG levels in ascending sigma order; each sigma is blurred once."""
    blurred = [gaussian_blur(features, s) for s in schedule.sigmas]
    return [hi - lo for lo, hi in zip(blurred, blurred[1:])]


def schedule_from_config(sigma0: float, ratio: float, levels: int, single: bool = False) -> ScaleSchedule:
    if single:
        return ScaleSchedule.single(sigma0, ratio, levels)
    return ScaleSchedule.geometric(sigma0, ratio, levels)


def as_schedule(sigmas: ScaleSchedule | Sequence[float]) -> ScaleSchedule:
    return sigmas if isinstance(sigmas, ScaleSchedule) else ScaleSchedule(tuple(sigmas))
