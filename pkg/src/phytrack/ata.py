"""Attention-enhanced temporal association.

Two-stage cross-attention over consecutive stride-4 features, a 4-D cosine
similarity volume at stride 8, and soft-argmax decoding of backward offsets.
Feature tensors are (B, C, H, W); the similarity volume is (B, h', w', h', w').
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


def cross_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Efficient cross-attention softmax_row(Q) @ (softmax_col(K)^T @ V).

    Shapes (..., n, d), (..., n, d), (..., n, dv) -> (..., n, dv). The n x n
    attention matrix is never formed.
    """
    if q.shape[-2] < 1 or q.shape[-1] < 1:
        raise ValueError("cross_attention needs n >= 1 and d >= 1")
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"incompatible shapes Q{tuple(q.shape)} K{tuple(k.shape)} V{tuple(v.shape)}")
    for name, t in (("Q", q), ("K", k), ("V", v)):
        if not torch.isfinite(t).all():
            raise ValueError(f"non-finite values in {name}")
    phi_q = q.softmax(dim=-1)
    phi_k = k.softmax(dim=-2)
    context = phi_k.transpose(-1, -2) @ v  # (..., d, dv)
    return phi_q @ context


def _attend(q_map, k_map, v_map):
    b, c, h, w = q_map.shape
    flat = lambda t: t.flatten(2).transpose(1, 2)  # noqa: E731  (B, n, C)
    out = cross_attention(flat(q_map), flat(k_map), flat(v_map))
    return out.transpose(1, 2).reshape(b, v_map.shape[1], h, w)


class CP(nn.Module):
    """Channel projection: a 1x1 convolution."""

    def __init__(self, cin, cout):
        super().__init__()
        self.proj = nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        return self.proj(x)


class CB(nn.Module):
    """1x1 convolution followed by batch normalisation."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 1, bias=False)
        self.norm = nn.BatchNorm2d(cout)

    def forward(self, x):
        return self.norm(self.conv(x))


@dataclass
class RefinedFeatureMap:
    """Stride-8 association feature (B, C, H/8, W/8)."""

    data: torch.Tensor
    stride: int = 8


class TSCA(nn.Module):
    """Two-stage cross-attention.

    Stage 1 refines each frame on its own after a shared stride-2 reduction:
    the previous frame through CP -> CB plus a residual, the current frame
    through a Conv branch and a CP branch combined by efficient attention, then
    CB plus a residual. Stage 2 queries with the refined previous frame and
    takes keys/values from the refined current frame; the result is added to
    the refined current frame to give omega.
    """

    def __init__(self, in_channels: int = 64, channels: int = 64):
        super().__init__()
        self.down = nn.Sequential(
            nn.Conv2d(in_channels, channels, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
        )
        self.prev_cp = CP(channels, channels)
        self.prev_cb = CB(channels, channels)
        self.cur_conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.cur_cp = CP(channels, channels)
        self.cur_cb = CB(channels, channels)
        self.q = CP(channels, channels)
        self.k = CP(channels, channels)
        self.v = CP(channels, channels)
        self.out_cb = CB(channels, channels)
        self.channels = channels

    def refine_prev(self, f_prev):
        d = self.down(f_prev)
        return d + self.prev_cb(self.prev_cp(d))

    def refine_cur(self, f_cur):
        d = self.down(f_cur)
        att = _attend(self.cur_conv(d), self.cur_cp(d), self.cur_cp(d))
        return d + self.cur_cb(att)

    def forward(self, f_prev: torch.Tensor, f_cur: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if f_prev.shape != f_cur.shape:
            raise ValueError(f"feature shapes differ: {tuple(f_prev.shape)} vs {tuple(f_cur.shape)}")
        r_prev = self.refine_prev(f_prev)
        r_cur = self.refine_cur(f_cur)
        omega = r_cur + self.out_cb(_attend(self.q(r_prev), self.k(r_cur), self.v(r_cur)))
        return r_prev, omega


def tsca(module: TSCA, f_prev: torch.Tensor, f_cur: torch.Tensor) -> tuple[RefinedFeatureMap, RefinedFeatureMap]:
    r_prev, omega = module(f_prev, f_cur)
    return RefinedFeatureMap(r_prev), RefinedFeatureMap(omega)


class SimilarityEmbed(nn.Module):
    """The shared embedding block applied to both frames before matching."""

    def __init__(self, channels: int = 64, embed: int = 64):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.proj = nn.Conv2d(channels, embed, 1)

    def forward(self, x):
        return self.proj(F.relu(self.conv(x)))


def cosine_volume(e_cur: torch.Tensor, e_prev: torch.Tensor) -> torch.Tensor:
    """S[b, i, j, k, l] = <e_cur[b, :, i, j], e_prev[b, :, k, l]> after L2 normalisation."""
    if e_cur.shape != e_prev.shape:
        raise ValueError(f"embedding shapes differ: {tuple(e_cur.shape)} vs {tuple(e_prev.shape)}")
    b, c, h, w = e_cur.shape
    a = F.normalize(e_cur.flatten(2), dim=1, eps=1e-8)
    p = F.normalize(e_prev.flatten(2), dim=1, eps=1e-8)
    s = torch.einsum("bcn,bcm->bnm", a, p)
    return s.reshape(b, h, w, h, w)


def similarity_volume(embed: SimilarityEmbed, omega_cur: torch.Tensor, omega_prev: torch.Tensor) -> torch.Tensor:
    return cosine_volume(embed(omega_cur), embed(omega_prev))


@dataclass
class OffsetField:
    """Backward (current -> previous) displacement in pixels, each (B, h', w')."""

    ox: torch.Tensor
    oy: torch.Tensor

    def stacked(self) -> torch.Tensor:
        return torch.stack([self.ox, self.oy], dim=1)


def offset_likelihoods(s: torch.Tensor, temperature: float = 1.0) -> tuple[torch.Tensor, torch.Tensor]:
    """Column and row likelihoods from a (B, h, w, h, w) volume.

    Returns cx (B, h, w, w) over previous-frame columns and cy (B, h, w, h)
    over previous-frame rows.
    """
    cx = (s.amax(dim=3) / temperature).softmax(dim=-1)
    cy = (s.amax(dim=4) / temperature).softmax(dim=-1)
    return cx, cy


def offset_templates(h: int, w: int, stride: float, dtype=torch.float32, device=None):
    """tx[j, l] = (l - j) * s and ty[i, k] = (k - i) * s."""
    cols = torch.arange(w, dtype=dtype, device=device)
    rows = torch.arange(h, dtype=dtype, device=device)
    tx = (cols[None, :] - cols[:, None]) * stride
    ty = (rows[None, :] - rows[:, None]) * stride
    return tx, ty


def offsets_from_similarity(s: torch.Tensor, stride: float = 8, temperature: float = 1.0,
                            return_likelihoods: bool = False):
    """Soft-argmax offsets from the similarity volume (unbatched input allowed)."""
    if stride <= 0:
        raise ValueError("stride must be positive")
    squeeze = s.dim() == 4
    if squeeze:
        s = s.unsqueeze(0)
    _, h, w, h2, w2 = s.shape
    if (h, w) != (h2, w2):
        raise ValueError(f"similarity volume must be (h, w, h, w), got {tuple(s.shape[1:])}")
    cx, cy = offset_likelihoods(s, temperature)
    tx, ty = offset_templates(h, w, stride, dtype=s.dtype, device=s.device)
    ox = (cx * tx[None, None, :, :]).sum(-1)  # template row indexed by j
    oy = (cy * ty[None, :, None, :]).sum(-1)  # template row indexed by i
    if squeeze:
        ox, oy, cx, cy = ox[0], oy[0], cx[0], cy[0]
    field = OffsetField(ox, oy)
    if return_likelihoods:
        return field, cx, cy
    return field
