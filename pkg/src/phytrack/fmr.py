"""Flow-agnostic movement refinement."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .ata import OffsetField

MEMORY_MODES = ("mean", "sum")


@dataclass
class OffsetMemory:
    """Running offset statistic for one sequence (the flow estimate).

    ``mode="mean"`` keeps the arithmetic mean of every absorbed field;
    ``mode="sum"`` is the recursive-sum ablation.
    """

    mean_ox: torch.Tensor | None = None
    mean_oy: torch.Tensor | None = None
    count: int = 0
    mode: str = "mean"

    def __post_init__(self):
        if self.mode not in MEMORY_MODES:
            raise ValueError(f"unknown memory mode {self.mode!r}")

    def reset(self) -> None:
        self.mean_ox = self.mean_oy = None
        self.count = 0

    def as_field(self) -> OffsetField:
        return OffsetField(self.mean_ox, self.mean_oy)


def update_memory(mem: OffsetMemory, offsets: OffsetField) -> OffsetMemory:
    ox, oy = offsets.ox.detach(), offsets.oy.detach()
    if mem.count == 0 or mem.mean_ox is None:
        return OffsetMemory(ox.clone(), oy.clone(), 1, mem.mode)
    if mem.mean_ox.shape != ox.shape or mem.mean_oy.shape != oy.shape:
        raise ValueError(f"offset shape {tuple(ox.shape)} does not match memory {tuple(mem.mean_ox.shape)}")
    n = mem.count
    if mem.mode == "mean":
        # incremental form: absorbing a field equal to the mean leaves it bit-identical
        new_x = mem.mean_ox + (ox - mem.mean_ox) / (n + 1)
        new_y = mem.mean_oy + (oy - mem.mean_oy) / (n + 1)
    else:
        new_x = ox + mem.mean_ox
        new_y = oy + mem.mean_oy
    return OffsetMemory(new_x, new_y, n + 1, mem.mode)


def flow_agnostic_offset(offsets: OffsetField, memory: OffsetField) -> OffsetField:
    """Omega = 2 O - lambda, elementwise, unclamped."""
    if offsets.ox.shape != memory.ox.shape or offsets.oy.shape != memory.oy.shape:
        raise ValueError("offset and memory shapes differ")
    return OffsetField(2 * offsets.ox - memory.ox, 2 * offsets.oy - memory.oy)


def gate_previous_features(omega_prev: torch.Tensor, heat_prev: torch.Tensor) -> torch.Tensor:
    """Hadamard gating of (B, C, h, w) features by a (B, h, w) heatmap in [0, 1]."""
    if heat_prev.dim() == omega_prev.dim():
        heat_prev = heat_prev.squeeze(1)
    if heat_prev.shape != omega_prev.shape[:1] + omega_prev.shape[2:]:
        raise ValueError(f"heatmap {tuple(heat_prev.shape)} does not match features {tuple(omega_prev.shape)}")
    if (heat_prev < 0).any() or (heat_prev > 1).any():
        raise ValueError("gating heatmap must lie in [0, 1]")
    return omega_prev * heat_prev.unsqueeze(1)


def bilinear_shift(h_prev: torch.Tensor, omega: OffsetField, stride: float) -> torch.Tensor:
    """Sample h_prev at (i + Oy/s, j + Ox/s) for every cell; zero outside the grid."""
    b, c, h, w = h_prev.shape
    rows = torch.arange(h, dtype=h_prev.dtype, device=h_prev.device).view(1, h, 1)
    cols = torch.arange(w, dtype=h_prev.dtype, device=h_prev.device).view(1, 1, w)
    y = rows + omega.oy / stride
    x = cols + omega.ox / stride
    # align_corners=True maps -1/+1 onto the first/last cell centres
    gx = 2.0 * x / max(w - 1, 1) - 1.0
    gy = 2.0 * y / max(h - 1, 1) - 1.0
    grid = torch.stack([gx, gy], dim=-1)
    return F.grid_sample(h_prev, grid, mode="bilinear", padding_mode="zeros", align_corners=True)


class Propagator(nn.Module):
    """Offset-guided bilinear sampling followed by a learnable 3x3 convolution."""

    def __init__(self, channels: int = 64, stride: float = 8):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.stride = stride

    def identity_init(self) -> "Propagator":
        with torch.no_grad():
            self.conv.weight.zero_()
            self.conv.bias.zero_()
            c = self.conv.weight.shape[0]
            self.conv.weight[torch.arange(c), torch.arange(c), 1, 1] = 1.0
        return self

    def forward(self, h_prev: torch.Tensor, omega: OffsetField) -> torch.Tensor:
        return self.conv(bilinear_shift(h_prev, omega, self.stride))


def propagate(module: Propagator, h_prev: torch.Tensor, omega: OffsetField) -> torch.Tensor:
    return module(h_prev, omega)


class Fuse(nn.Module):
    """Concatenate f_t with the (upsampled) propagated feature, 1x1 conv back to f_t's width."""

    def __init__(self, feat_channels: int = 64, prop_channels: int = 64):
        super().__init__()
        self.conv = nn.Conv2d(feat_channels + prop_channels, feat_channels, 1)
        self.feat_channels = feat_channels

    def passthrough_init(self) -> "Fuse":
        # identity on the f_t slice; the propagated slice keeps its init
        with torch.no_grad():
            c = self.feat_channels
            self.conv.weight[:, :c].zero_()
            self.conv.bias.zero_()
            self.conv.weight[torch.arange(c), torch.arange(c), 0, 0] = 1.0
        return self

    def forward(self, f_t: torch.Tensor, propagated: torch.Tensor) -> torch.Tensor:
        if propagated.shape[-2:] != f_t.shape[-2:]:
            propagated = F.interpolate(propagated, size=f_t.shape[-2:], mode="bilinear", align_corners=False)
        return self.conv(torch.cat([f_t, propagated], dim=1))


def fuse(module: Fuse, f_t: torch.Tensor, propagated: torch.Tensor) -> torch.Tensor:
    return module(f_t, propagated)
