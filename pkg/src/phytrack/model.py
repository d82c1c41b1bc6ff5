"""The full network: TFE -> TSCA -> similarity/offsets -> FMR -> head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .ata import TSCA, OffsetField, SimilarityEmbed, cosine_volume, offsets_from_similarity
from .fmr import Fuse, OffsetMemory, Propagator, flow_agnostic_offset, gate_previous_features, update_memory
from .head import Head, HeadOutput
from .tfe import TextureFeatureExtractor

ASSOC_STRIDE = 8


@dataclass
class ModelConfig:
    widths: tuple[int, int, int, int] = (16, 32, 64, 64)
    feature_channels: int = 64
    assoc_channels: int = 64
    head_channels: int = 32
    num_classes: int = 6
    srm_mode: str = "paper"
    memory_mode: str = "mean"
    temperature: float = 0.05

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


@dataclass
class StepOutput:
    head: HeadOutput
    feature: torch.Tensor  # f^t, stride 4
    omega: torch.Tensor  # omega^t, stride 8
    offsets: OffsetField | None = None
    flow_agnostic: OffsetField | None = None
    similarity: torch.Tensor | None = None
    likelihoods: tuple[torch.Tensor, torch.Tensor] | None = None
    memory: OffsetMemory | None = None
    extras: dict = field(default_factory=dict)


def center_to_assoc(center: torch.Tensor) -> torch.Tensor:
    """Stride-4 class-agnostic heatmap (B, h, w) -> stride-8 by 2x2 max pooling."""
    return F.max_pool2d(center.unsqueeze(1), 2, ceil_mode=True).squeeze(1)


class PhyTrackerNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        self.tfe = TextureFeatureExtractor(cfg.widths, cfg.feature_channels, cfg.srm_mode)
        self.tsca = TSCA(cfg.feature_channels, cfg.assoc_channels)
        self.embed = SimilarityEmbed(cfg.assoc_channels, cfg.assoc_channels)
        self.propagator = Propagator(cfg.assoc_channels, ASSOC_STRIDE)
        self.fuse = Fuse(cfg.feature_channels, cfg.assoc_channels).passthrough_init()
        self.head = Head(cfg.feature_channels, cfg.num_classes, cfg.head_channels)

    def features(self, frames: torch.Tensor) -> torch.Tensor:
        return self.tfe(frames)

    def detect_only(self, f_cur: torch.Tensor) -> HeadOutput:
        b, _, h, w = f_cur.shape
        zeros = f_cur.new_zeros(b, self.config.assoc_channels, h, w)
        return self.head(self.fuse(f_cur, zeros))

    def step(
        self,
        f_prev: torch.Tensor,
        f_cur: torch.Tensor,
        omega_prev: torch.Tensor | None,
        heat_prev: torch.Tensor,
        memory: OffsetMemory,
    ) -> StepOutput:
        """One association + detection step given the previous frame's cached state.

        ``heat_prev`` is the previous class-agnostic heatmap at stride 8. When
        ``omega_prev`` is None the stage-1 refined previous feature stands in.
        """
        r_prev, omega = self.tsca(f_prev, f_cur)
        if omega_prev is None:
            omega_prev = r_prev
        s = cosine_volume(self.embed(omega), self.embed(omega_prev))
        offsets, cx, cy = offsets_from_similarity(s, ASSOC_STRIDE, self.config.temperature,
                                                  return_likelihoods=True)
        memory = update_memory(memory, offsets)
        flow_free = flow_agnostic_offset(offsets, memory.as_field())
        gated = gate_previous_features(omega_prev, heat_prev)
        propagated = self.propagator(gated, flow_free)
        out = self.head(self.fuse(f_cur, propagated))
        return StepOutput(out, f_cur, omega, offsets, flow_free, s, (cx, cy), memory)
