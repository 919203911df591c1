"""ConvLSTM cell, bidirectional fusion over SSR steps, and the segmentation head."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

GATES = ("i", "f", "o", "c")
FUSION_STRATEGIES = ("average", "conv_layer", "bconvlstm")


class ConvLSTMCell(nn.Module):
    """Peephole ConvLSTM cell.

    The four gate kernels are stored stacked along the output axis in the
    order i, f, o, c; peepholes are per-channel vectors for i, f, o.
    """

    def __init__(self, in_channels: int, hidden: int, kernel_size: int = 3):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        self.in_channels = in_channels
        self.hidden = hidden
        self.kernel_size = kernel_size
        self.weight_x = nn.Parameter(torch.empty(4 * hidden, in_channels, kernel_size, kernel_size))
        self.weight_h = nn.Parameter(torch.empty(4 * hidden, hidden, kernel_size, kernel_size))
        self.peephole = nn.Parameter(torch.zeros(3, hidden))
        self.bias = nn.Parameter(torch.zeros(4, hidden))
        self.reset_parameters()

    def reset_parameters(self):
        fan_in = (self.in_channels + self.hidden) * self.kernel_size**2
        bound = 1.0 / math.sqrt(fan_in)
        with torch.no_grad():
            self.weight_x.uniform_(-bound, bound)
            self.weight_h.uniform_(-bound, bound)
            self.peephole.zero_()
            self.bias.zero_()
            self.bias[1].fill_(1.0)

    def gate_weights(self, gate: str) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        g = GATES.index(gate)
        sl = slice(g * self.hidden, (g + 1) * self.hidden)
        return self.weight_x[sl], self.weight_h[sl], self.bias[g]

    def init_state(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, _, h, w = x.shape
        z = x.new_zeros(b, self.hidden, h, w)
        return z, z

    def input_projection(self, x: torch.Tensor) -> torch.Tensor:
        """W_x * x for every gate; accepts several timesteps stacked on the batch axis."""
        return F.conv2d(x, self.weight_x, padding=self.kernel_size // 2)

    def forward(self, x: torch.Tensor, h_prev: torch.Tensor, c_prev: torch.Tensor):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected input (B,{self.in_channels},h,w), got {tuple(x.shape)}")
        return self.step_projected(self.input_projection(x), h_prev, c_prev)

    def step_projected(self, zx: torch.Tensor, h_prev: torch.Tensor, c_prev: torch.Tensor):
        if h_prev.shape != c_prev.shape or h_prev.shape[1] != self.hidden or h_prev.shape[-2:] != zx.shape[-2:]:
            raise ValueError("hidden/cell state shapes inconsistent with input")
        z = zx + F.conv2d(h_prev, self.weight_h, padding=self.kernel_size // 2)
        z = z + self.bias.reshape(-1)[None, :, None, None]
        zi, zf, zo, zc = z.chunk(4, dim=1)
        peep = self.peephole[:, None, :, None, None]
        i = torch.sigmoid(zi + peep[0] * c_prev)
        f = torch.sigmoid(zf + peep[1] * c_prev)
        o = torch.sigmoid(zo + peep[2] * c_prev)
        cand = torch.tanh(zc)
        c = f * c_prev + i * cand
        h = o * torch.tanh(c)
        return h, c


def convlstm_step(x, h_prev, c_prev, cell: ConvLSTMCell):
    return cell(x, h_prev, c_prev)


def run_cell(cell: ConvLSTMCell, steps: list[torch.Tensor]) -> torch.Tensor:
    """Final hidden state after feeding ``steps`` in order from zero states."""
    b = steps[0].shape[0]
    zx = cell.input_projection(torch.cat(steps, dim=0)).split(b, dim=0)
    h, c = cell.init_state(steps[0])
    for z in zx:
        h, c = cell.step_projected(z, h, c)
    return h


class BConvLSTM(nn.Module):
    """Forward and backward ConvLSTMs whose final hidden maps are merged by a conv + tanh."""

    def __init__(self, in_channels: int, hidden: int, out_channels: int, kernel_size: int = 3):
        super().__init__()
        self.forward_cell = ConvLSTMCell(in_channels, hidden, kernel_size)
        self.backward_cell = ConvLSTMCell(in_channels, hidden, kernel_size)
        self.out_fwd = nn.Conv2d(hidden, out_channels, kernel_size, padding=kernel_size // 2, bias=False)
        self.out_bwd = nn.Conv2d(hidden, out_channels, kernel_size, padding=kernel_size // 2, bias=False)
        self.out_bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, steps: list[torch.Tensor]) -> torch.Tensor:
        if len(steps) == 0:
            raise ValueError("bconvlstm needs a non-empty sequence")
        h_fwd = run_cell(self.forward_cell, steps)
        h_bwd = run_cell(self.backward_cell, steps[::-1])
        z = self.out_fwd(h_fwd) + self.out_bwd(h_bwd) + self.out_bias[None, :, None, None]
        return torch.tanh(z)


def bconvlstm_forward(steps, model: BConvLSTM) -> torch.Tensor:
    return model(list(getattr(steps, "steps", steps)))


class AverageFusion(nn.Module):
    def forward(self, steps: list[torch.Tensor]) -> torch.Tensor:
        if len(steps) == 0:
            raise ValueError("cannot average an empty sequence")
        return torch.stack(steps, 0).mean(0)


class ConvLayerFusion(nn.Module):
    """Channel-concatenate all steps, then a single 3x3 convolution."""

    def __init__(self, n_steps: int, channels: int, kernel_size: int = 3):
        super().__init__()
        self.n_steps = n_steps
        self.conv = nn.Conv2d(n_steps * channels, channels, kernel_size, padding=kernel_size // 2)

    def forward(self, steps: list[torch.Tensor]) -> torch.Tensor:
        if len(steps) != self.n_steps:
            raise ValueError(f"conv_layer fusion built for {self.n_steps} steps, got {len(steps)}")
        return self.conv(torch.cat(steps, dim=1))


def make_fusion(strategy: str, n_steps: int, channels: int, hidden: int) -> nn.Module:
    if strategy == "average":
        return AverageFusion()
    if strategy == "conv_layer":
        return ConvLayerFusion(n_steps, channels)
    if strategy == "bconvlstm":
        return BConvLSTM(channels, hidden, channels)
    raise ValueError(f"unknown fusion strategy {strategy!r}; choose from {FUSION_STRATEGIES}")


def fuse_scale_space(sequence, strategy: str, module: nn.Module) -> torch.Tensor:
    """Dispatch a sequence to the fusion module matching ``strategy``."""
    expected = {"average": AverageFusion, "conv_layer": ConvLayerFusion, "bconvlstm": BConvLSTM}
    if strategy not in expected:
        raise ValueError(f"unknown fusion strategy {strategy!r}; choose from {FUSION_STRATEGIES}")
    if not isinstance(module, expected[strategy]):
        raise ValueError(f"module {type(module).__name__} does not implement {strategy!r}")
    return module(list(getattr(sequence, "steps", sequence)))


def upsample_stages(in_size: tuple[int, int], out_size: tuple[int, int]) -> int:
    """Number of 2x stages from ``in_size`` to ``out_size``; raises if not a power of two apart."""
    n = None
    for a, b in zip(in_size, out_size):
        ratio = b / a
        k = round(math.log2(ratio)) if ratio >= 1 else -1
        if k < 0 or a * 2**k != b:
            raise ValueError(f"cannot reach {tuple(out_size)} from {tuple(in_size)} by 2x upsampling")
        if n is not None and k != n:
            raise ValueError("height and width need the same number of 2x stages")
        n = k
    return n


class SegmentationHead(nn.Module):
    """conv-BN-ReLU, then (2x nearest upsample, conv-BN-ReLU) per stage, then 1x1 conv + sigmoid."""

    def __init__(self, in_channels: int, in_size: tuple[int, int], out_size: tuple[int, int],
                 width: int = 64, min_width: int = 16):
        super().__init__()
        self.in_size = tuple(in_size)
        self.out_size = tuple(out_size)
        n_up = upsample_stages(self.in_size, self.out_size)
        layers = [self._stage(in_channels, width)]
        c = width
        for _ in range(n_up):
            nxt = max(min_width, c // 2)
            layers.append(nn.Upsample(scale_factor=2, mode="nearest"))
            layers.append(self._stage(c, nxt))
            c = nxt
        self.body = nn.Sequential(*layers)
        self.classifier = nn.Conv2d(c, 1, 1)

    @staticmethod
    def _stage(cin: int, cout: int) -> nn.Sequential:
        return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        if tuple(fused.shape[-2:]) != self.in_size:
            raise ValueError(f"head expects spatial size {self.in_size}, got {tuple(fused.shape[-2:])}")
        return torch.sigmoid(self.classifier(self.body(fused))).squeeze(1)


def segmentation_head(fused: torch.Tensor, target: tuple[int, int], head: SegmentationHead) -> torch.Tensor:
    if tuple(target) != head.out_size:
        raise ValueError(f"head was built for {head.out_size}, asked for {tuple(target)}")
    return head(fused)
