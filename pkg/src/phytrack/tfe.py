"""Texture-enhanced feature extraction: fixed SRM residual filters inside SIE
blocks, a dilated stem and a small encoder-decoder backbone."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

# weak edge, strong edge, sharpen
SRM_RESIDUAL = (
    (
        (0, 0, 0, 0, 0),
        (0, -1, 2, -1, 0),
        (0, 2, -4, 2, 0),
        (0, -1, 2, -1, 0),
        (0, 0, 0, 0, 0),
    ),
    (
        (-1, 2, -2, 2, -1),
        (2, -6, 8, -6, 2),
        (-2, 8, -12, 8, -2),
        (2, -6, 8, -6, 2),
        (-1, 2, -2, 2, -1),
    ),
    (
        (-1, -1, -1, -1, -1),
        (-1, 0, 0, 0, -1),
        (-1, 0, 8, 0, -1),
        (-1, 0, 0, 0, -1),
        (-1, -1, -1, -1, -1),
    ),
)

# horizontal edge, vertical edge, sharpen
SRM_CLASSIC = (
    (
        (-1, -2, -4, -2, -1),
        (0, 0, 0, 0, 0),
        (0, 0, 0, 0, 0),
        (0, 0, 0, 0, 0),
        (1, 2, 4, 2, 1),
    ),
    (
        (-1, 0, 0, 0, 1),
        (-2, 0, 0, 0, 2),
        (-4, 0, 0, 0, 4),
        (-2, 0, 0, 0, 2),
        (-1, 0, 0, 0, 1),
    ),
    (
        (0, 0, -1, 0, 0),
        (0, 0, -1, 0, 0),
        (-1, -1, 9, -1, -1),
        (0, 0, -1, 0, 0),
        (0, 0, -1, 0, 0),
    ),
)

SRM_MODES = {"paper": SRM_RESIDUAL, "classic": SRM_CLASSIC}


def srm_kernels(mode: str = "paper", dtype=torch.float32) -> torch.Tensor:
    """The three fixed 5x5 kernels as a (3, 5, 5) tensor."""
    if mode not in SRM_MODES:
        raise ValueError(f"unknown srm mode {mode!r}; expected one of {sorted(SRM_MODES)}")
    return torch.tensor(SRM_MODES[mode], dtype=dtype)


def srm_filter(x: torch.Tensor, kernels: torch.Tensor) -> torch.Tensor:
    """Cross-correlate every kernel with every channel (replicate border).

    (B, C, H, W) -> (B, 3C, H, W); output channel c*3 + k is kernel k on channel c.
    """
    if x.dim() != 4:
        raise ValueError(f"expected (B, C, H, W), got shape {tuple(x.shape)}")
    c = x.shape[1]
    nk, kh, kw = kernels.shape
    weight = kernels.to(x.dtype).repeat(c, 1, 1).unsqueeze(1)  # (C*nk, 1, kh, kw)
    xp = F.pad(x, (kw // 2, kw // 2, kh // 2, kh // 2), mode="replicate")
    return F.conv2d(xp, weight, groups=c)


class SRMLayer(nn.Module):
    def __init__(self, mode: str = "paper"):
        super().__init__()
        self.mode = mode
        # buffer, not a parameter: never touched by the optimizer
        self.register_buffer("kernels", srm_kernels(mode))

    def forward(self, x):
        return srm_filter(x, self.kernels)


class SIEBlock(nn.Module):
    """3x3 conv -> norm -> ReLU -> SRM -> 1x1 compression, added back to the input."""

    def __init__(self, channels: int, srm_mode: str = "paper"):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm = nn.BatchNorm2d(channels)
        self.srm = SRMLayer(srm_mode)
        self.compress = nn.Conv2d(3 * channels, channels, 1)

    def stage1(self, x):
        return F.relu(self.norm(self.conv(x)))

    def forward(self, x):
        return x + self.compress(self.srm(self.stage1(x)))


def conv_bn_relu(cin, cout, stride=1, dilation=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


@dataclass
class FeatureMap:
    """Stride-4 appearance feature. ``data`` is (B, C, H/4, W/4)."""

    data: torch.Tensor
    stride: int = 4
    source_frame: int | None = None


class TextureFeatureExtractor(nn.Module):
    """Frame (B, 3, H, W) in [0, 1] -> stride-4, ``out_channels`` feature.

    Layout: a dilated stem down to stride 2, three SIE blocks, concatenation with
    the image resized to stem resolution, then a four-stage encoder-decoder
    (strides 2/4/8/16) with skips, decoded back to stride 4.
    """

    def __init__(self, widths=(16, 32, 64, 64), out_channels: int = 64, srm_mode: str = "paper",
                 num_sie: int = 3):
        super().__init__()
        w1, w2, w3, w4 = widths
        self.stem = nn.Sequential(
            conv_bn_relu(3, w1, dilation=2),
            conv_bn_relu(w1, w1, stride=2, dilation=2),
        )
        self.sie = nn.Sequential(*[SIEBlock(w1, srm_mode) for _ in range(num_sie)])
        self.enc1 = conv_bn_relu(w1 + 3, w1)
        self.enc2 = nn.Sequential(conv_bn_relu(w1, w2, stride=2), conv_bn_relu(w2, w2))
        self.enc3 = nn.Sequential(conv_bn_relu(w2, w3, stride=2), conv_bn_relu(w3, w3))
        self.enc4 = nn.Sequential(conv_bn_relu(w3, w4, stride=2), conv_bn_relu(w4, w4))
        self.dec3 = conv_bn_relu(w4 + w3, out_channels)
        self.dec2 = conv_bn_relu(out_channels + w2, w2)
        self.out = nn.Conv2d(w2, out_channels, 1)
        self.out_channels = out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h < 32 or w < 32:
            raise ValueError(f"frame must be at least 32x32, got {h}x{w}")
        x = pad_to_multiple(x, 16)
        s = self.sie(self.stem(x))
        raw = F.interpolate(x, size=s.shape[-2:], mode="bilinear", align_corners=False)
        e1 = self.enc1(torch.cat([s, raw], dim=1))
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        e4 = self.enc4(e3)
        d3 = self.dec3(torch.cat([F.interpolate(e4, size=e3.shape[-2:], mode="nearest"), e3], dim=1))
        d2 = self.dec2(torch.cat([F.interpolate(d3, size=e2.shape[-2:], mode="nearest"), e2], dim=1))
        return self.out(d2)


def pad_to_multiple(x: torch.Tensor, multiple: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return x
    return F.pad(x, (0, pw, 0, ph), mode="replicate")


def extract_features(model: TextureFeatureExtractor, frame: torch.Tensor, index: int | None = None) -> FeatureMap:
    if frame.dim() == 3:
        frame = frame.unsqueeze(0)
    return FeatureMap(model(frame), stride=4, source_frame=index)
