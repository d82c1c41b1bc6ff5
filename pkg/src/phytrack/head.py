"""CenterNet-style head: heatmaps, size and sub-stride offset; decoding and losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .ata import offset_likelihoods

HEAD_STRIDE = 4


@dataclass
class HeadOutput:
    """All maps are (B, ., H/4, W/4); ``center`` is (B, H/4, W/4)."""

    class_heatmap: torch.Tensor
    size: torch.Tensor
    local_offset: torch.Tensor

    @property
    def center(self) -> torch.Tensor:
        return self.class_heatmap.amax(dim=1)


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]  # left, top, width, height
    score: float
    class_id: int
    center: tuple[float, float]  # x, y in pixels


class Head(nn.Module):
    def __init__(self, in_channels: int = 64, num_classes: int = 6, head_channels: int = 32):
        super().__init__()

        def branch(out):
            return nn.Sequential(
                nn.Conv2d(in_channels, head_channels, 3, padding=1),
                nn.ReLU(inplace=True),
                nn.Conv2d(head_channels, out, 1),
            )

        self.heatmap = branch(num_classes)
        self.size = branch(2)
        self.offset = branch(2)
        nn.init.constant_(self.heatmap[-1].bias, -2.19)
        self.num_classes = num_classes

    def forward(self, x: torch.Tensor) -> HeadOutput:
        return HeadOutput(
            class_heatmap=torch.sigmoid(self.heatmap(x)),
            size=self.size(x),
            local_offset=self.offset(x),
        )


def head_forward(head: Head, fused: torch.Tensor) -> HeadOutput:
    return head(fused)


# ---------------------------------------------------------------------------
# decoding


def find_peaks(heat: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """(row, col) where a 2-D map equals its 3x3 neighbourhood max and exceeds threshold."""
    t = torch.from_numpy(np.ascontiguousarray(heat, dtype=np.float64))[None, None]
    hmax = F.max_pool2d(t, 3, stride=1, padding=1)[0, 0].numpy()
    mask = (heat == hmax) & (heat > threshold)
    rows, cols = np.nonzero(mask)
    return list(zip(rows.tolist(), cols.tolist()))


def decode(out: HeadOutput, threshold: float = 0.4, image_size: tuple[int, int] | None = None,
           batch_index: int = 0) -> list[Detection]:
    """Peaks of the class-agnostic heatmap -> detections in (row, column) order.

    The class is the argmax channel at the peak (lowest index on ties).
    ``image_size`` is (height, width) for clipping boxes.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    heat = out.class_heatmap[batch_index].detach().cpu().double().numpy()
    size = out.size[batch_index].detach().cpu().double().numpy()
    off = out.local_offset[batch_index].detach().cpu().double().numpy()
    center = heat.max(axis=0)
    dets = []
    for r, col in find_peaks(center, threshold):
        c = int(np.argmax(heat[:, r, col]))
        cx = (col + off[0, r, col]) * HEAD_STRIDE
        cy = (r + off[1, r, col]) * HEAD_STRIDE
        w = max(size[0, r, col], 0.0)
        h = max(size[1, r, col], 0.0)
        left, top = cx - w / 2, cy - h / 2
        if image_size is not None:
            ih, iw = image_size
            x0, y0 = min(max(left, 0.0), iw), min(max(top, 0.0), ih)
            x1, y1 = min(max(left + w, 0.0), iw), min(max(top + h, 0.0), ih)
            left, top, w, h = x0, y0, x1 - x0, y1 - y0
        dets.append(Detection((float(left), float(top), float(w), float(h)), float(center[r, col]), c,
                              (float(cx), float(cy))))
    return dets


# ---------------------------------------------------------------------------
# training targets


def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """CenterNet's size-adaptive radius (box dims in heatmap cells)."""
    a1 = 1
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1**2 - 4 * a1 * c1)) / 2
    a2 = 4
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2**2 - 4 * a2 * c2)) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3**2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


@dataclass
class Targets:
    """Rendered supervision for one frame at stride 4 (numpy, unbatched)."""

    heatmap: np.ndarray  # (K, h, w)
    size: np.ndarray  # (2, h, w), valid where mask
    offset: np.ndarray  # (2, h, w)
    mask: np.ndarray  # (h, w) bool, object centres
    centers: dict  # track_id -> (cx, cy) pixels


def render_targets(boxes, num_classes: int, out_hw: tuple[int, int]) -> Targets:
    """``boxes`` is an iterable of (track_id, left, top, width, height, class_id)."""
    h, w = out_hw
    heat = np.zeros((num_classes, h, w), dtype=np.float32)
    size = np.zeros((2, h, w), dtype=np.float32)
    off = np.zeros((2, h, w), dtype=np.float32)
    mask = np.zeros((h, w), dtype=bool)
    centers = {}
    ys, xs = np.mgrid[0:h, 0:w]
    for tid, left, top, bw, bh, cls in boxes:
        cx, cy = left + bw / 2, top + bh / 2
        centers[tid] = (cx, cy)
        gx, gy = cx / HEAD_STRIDE, cy / HEAD_STRIDE
        ix, iy = int(gx), int(gy)
        if not (0 <= ix < w and 0 <= iy < h):
            continue
        radius = max(0.0, gaussian_radius(bh / HEAD_STRIDE, bw / HEAD_STRIDE))
        sigma = (2 * int(radius) + 1) / 6
        g = np.exp(-((xs - ix) ** 2 + (ys - iy) ** 2) / (2 * sigma**2))
        heat[cls] = np.maximum(heat[cls], g)
        size[:, iy, ix] = (bw, bh)
        off[:, iy, ix] = (gx - ix, gy - iy)
        mask[iy, ix] = True
    return Targets(heat, size, off, mask, centers)


# ---------------------------------------------------------------------------
# losses


def focal_heatmap_loss(pred: torch.Tensor, target: torch.Tensor, beta: float = 2.0, eps: float = 1e-4) -> torch.Tensor:
    """Soft-target focal loss, zero exactly where pred == target.

    -|y - p|^beta * (y log p + (1 - y) log(1 - p)), summed and normalised by
    the number of peaks (target == 1).
    """
    p = pred.clamp(eps, 1 - eps)
    ce = -(target * torch.log(p) + (1 - target) * torch.log(1 - p))
    loss = ((target - p).abs() ** beta * ce).sum()
    num_pos = (target >= 1).sum().clamp(min=1)
    return loss / num_pos


def det_loss(out: HeadOutput, targets, size_weight: float = 0.1, offset_weight: float = 1.0,
             return_parts: bool = False):
    """Heatmap focal term + L1 on size and sub-stride offset at object centres.

    ``targets`` holds tensors ``heatmap`` (B,K,h,w), ``size``/``offset`` (B,2,h,w),
    ``mask`` (B,h,w).
    """
    heat_t = torch.as_tensor(targets["heatmap"], dtype=out.class_heatmap.dtype)
    mask = torch.as_tensor(targets["mask"]).bool().unsqueeze(1)
    n = mask.sum().clamp(min=1)
    hm = focal_heatmap_loss(out.class_heatmap, heat_t)
    size_t = torch.as_tensor(targets["size"], dtype=out.size.dtype)
    off_t = torch.as_tensor(targets["offset"], dtype=out.local_offset.dtype)
    size_l = ((out.size - size_t).abs() * mask).sum() / n
    off_l = ((out.local_offset - off_t).abs() * mask).sum() / n
    total = hm + size_weight * size_l + offset_weight * off_l
    if return_parts:
        return total, {"heatmap": hm, "size": size_l, "offset": off_l}
    return total


def cva_loss_from_likelihoods(cx: torch.Tensor, cy: torch.Tensor, correspondences, eps: float = 1e-12) -> torch.Tensor:
    """Cross-entropy of column/row likelihoods against previous-frame cells.

    ``cx`` (B, h, w, w), ``cy`` (B, h, w, h); ``correspondences`` is an iterable
    of (b, i, j, k, l): object at cell (i, j) of frame t was at (k, l) in t-1.
    Summed over correspondences.
    """
    if cx.dim() == 3:
        cx, cy = cx.unsqueeze(0), cy.unsqueeze(0)
    _, h, w, _ = cx.shape
    total = cx.new_zeros(())
    for b, i, j, k, l in correspondences:
        if not (0 <= i < h and 0 <= j < w and 0 <= k < h and 0 <= l < w):
            raise ValueError(f"correspondence ({i},{j})->({k},{l}) outside the {h}x{w} grid")
        total = total - torch.log(cx[b, i, j, l].clamp(min=eps)) - torch.log(cy[b, i, j, k].clamp(min=eps))
    return total


def cva_loss(s: torch.Tensor, correspondences, temperature: float = 1.0) -> torch.Tensor:
    if s.dim() == 4:
        s = s.unsqueeze(0)
    cx, cy = offset_likelihoods(s, temperature)
    return cva_loss_from_likelihoods(cx, cy, correspondences)
