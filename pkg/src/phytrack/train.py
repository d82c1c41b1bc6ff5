"""Training on consecutive-frame triplets with L = L_det + w * L_CVA."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import save_model
from .fmr import OffsetMemory
from .head import HEAD_STRIDE, det_loss, cva_loss_from_likelihoods, render_targets
from .model import ASSOC_STRIDE, ModelConfig, PhyTrackerNet, center_to_assoc
from .motio import MotRow, load_sequence

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 5
    lr: float = 2.5e-4
    decay_epochs: tuple[int, ...] = (40, 50)
    decay_factor: float = 0.1
    cva_weight: float = 1.0
    flip_prob: float = 0.5
    affine_prob: float = 0.3
    samples_per_epoch: int = 0  # 0 = every triplet once
    seed: int = 0


def frames_to_tensor(frames: np.ndarray) -> torch.Tensor:
    """(..., H, W, 3) uint8 -> (..., 3, H, W) float in [0, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(frames)).float() / 255.0
    return t.movedim(-1, -3)


class TripletDataset:
    """All (t-2, t-1, t) windows of a set of sequences, with per-frame boxes."""

    def __init__(self, sequences: list[tuple[np.ndarray, list[MotRow]]]):
        self.sequences = []
        self.index = []
        for s, (frames, rows) in enumerate(sequences):
            by_frame: dict[int, list] = {}
            for r in rows:
                by_frame.setdefault(r.frame, []).append((r.track_id, r.left, r.top, r.width, r.height, r.class_id))
            self.sequences.append((frames, by_frame))
            for t in range(3, len(frames) + 1):
                self.index.append((s, t))

    def __len__(self):
        return len(self.index)

    def sample(self, i: int):
        s, t = self.index[i]
        frames, by_frame = self.sequences[s]
        imgs = frames[t - 3 : t]
        boxes = [by_frame.get(k, []) for k in (t - 2, t - 1, t)]
        return imgs, boxes


def _augment(imgs: np.ndarray, boxes, rng: np.random.Generator, cfg: TrainConfig):
    x = frames_to_tensor(imgs)  # (3, 3, H, W)
    _, _, h, w = x.shape
    if rng.random() < cfg.flip_prob:
        x = x.flip(-1)
        boxes = [[(tid, w - l - bw, t, bw, bh, c) for tid, l, t, bw, bh, c in fb] for fb in boxes]
    if rng.random() < cfg.affine_prob:
        s = float(rng.uniform(0.85, 1.15))
        tx = float(rng.uniform(-0.1, 0.1) * w)
        ty = float(rng.uniform(-0.1, 0.1) * h)
        ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float32) + 0.5,
                                torch.arange(w, dtype=torch.float32) + 0.5, indexing="ij")
        src_x = (xs - tx) / s
        src_y = (ys - ty) / s
        grid = torch.stack([src_x / w * 2 - 1, src_y / h * 2 - 1], dim=-1)[None].expand(3, -1, -1, -1)
        x = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
        new_boxes = []
        for fb in boxes:
            out = []
            for tid, l, t, bw, bh, c in fb:
                x0, y0 = l * s + tx, t * s + ty
                x1, y1 = x0 + bw * s, y0 + bh * s
                x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, w), min(y1, h)
                if x1 - x0 >= 1 and y1 - y0 >= 1:
                    out.append((tid, x0, y0, x1 - x0, y1 - y0, c))
            new_boxes.append(out)
        boxes = new_boxes
    return x, boxes


def build_batch(samples, num_classes: int, out_hw: tuple[int, int]):
    """Stack augmented triplets and render detection / correspondence targets."""
    frames = torch.stack([s[0] for s in samples])  # (B, 3, 3, H, W)
    heat, size, off, mask, heat_prev = [], [], [], [], []
    corr = []
    ah, aw = math.ceil(out_hw[0] / 2), math.ceil(out_hw[1] / 2)
    for b, (_, boxes) in enumerate(samples):
        tgt = render_targets(boxes[2], num_classes, out_hw)
        prev = render_targets(boxes[1], num_classes, out_hw)
        heat.append(tgt.heatmap)
        size.append(tgt.size)
        off.append(tgt.offset)
        mask.append(tgt.mask)
        heat_prev.append(prev.heatmap.max(axis=0) if num_classes else np.zeros(out_hw, np.float32))
        for tid, (cx, cy) in tgt.centers.items():
            if tid not in prev.centers:
                continue
            px, py = prev.centers[tid]
            i, j = int(cy // ASSOC_STRIDE), int(cx // ASSOC_STRIDE)
            k, l = int(py // ASSOC_STRIDE), int(px // ASSOC_STRIDE)
            if 0 <= i < ah and 0 <= j < aw and 0 <= k < ah and 0 <= l < aw:
                corr.append((b, i, j, k, l))
    targets = {
        "heatmap": torch.from_numpy(np.stack(heat)),
        "size": torch.from_numpy(np.stack(size)),
        "offset": torch.from_numpy(np.stack(off)),
        "mask": torch.from_numpy(np.stack(mask)),
    }
    heat_prev = center_to_assoc(torch.from_numpy(np.stack(heat_prev)))
    return frames, targets, heat_prev, corr


def training_losses(model: PhyTrackerNet, frames, targets, heat_prev, corr, cva_weight: float):
    b = frames.shape[0]
    # t-2 only feeds the cached omega^{t-1}; no gradient through its backbone pass
    with torch.no_grad():
        f2 = model.features(frames[:, 0])
    feats = model.features(frames[:, 1:].flatten(0, 1)).unflatten(0, (b, 2))
    f1, f0 = feats[:, 0], feats[:, 1]  # t-1, t
    _, omega_prev = model.tsca(f2, f1)
    step = model.step(f1, f0, omega_prev, heat_prev, OffsetMemory(mode=model.config.memory_mode))
    det = det_loss(step.head, targets)
    cx, cy = step.likelihoods
    cva = cva_loss_from_likelihoods(cx, cy, corr) / max(len(corr), 1)
    total = det + cva_weight * cva
    return total, det, cva


def train_model(sequences, model_cfg: ModelConfig, cfg: TrainConfig, out_dir: str | Path,
                progress: bool = False) -> dict:
    """Train and write ``loss.csv``, ``final.ckpt`` and ``best.ckpt`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    data = TripletDataset(sequences)
    if len(data) == 0:
        raise ValueError("no training triplets (need sequences with >= 3 frames)")
    model = PhyTrackerNet(model_cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(cfg.decay_epochs), gamma=cfg.decay_factor)
    h, w = frames_hw = sequences[0][0].shape[1:3]
    out_hw = (math.ceil(h / 16) * 16 // HEAD_STRIDE, math.ceil(w / 16) * 16 // HEAD_STRIDE)
    per_epoch = cfg.samples_per_epoch or len(data)
    history = []
    best = math.inf
    start = time.time()
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(data))
        if per_epoch < len(order):
            order = order[:per_epoch]
        sums = np.zeros(3)
        batches = 0
        for bstart in range(0, len(order), cfg.batch_size):
            idx = order[bstart : bstart + cfg.batch_size]
            samples = [_augment(*data.sample(int(i)), rng, cfg) for i in idx]
            frames, targets, heat_prev, corr = build_batch(samples, model_cfg.num_classes, out_hw)
            total, det, cva = training_losses(model, frames, targets, heat_prev, corr, cfg.cva_weight)
            for name, value in (("det", det), ("cva", cva), ("total", total)):
                if not torch.isfinite(value):
                    raise NumericError(f"non-finite {name} loss at epoch {epoch}, batch {batches}")
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += (det.item(), cva.item(), total.item())
            batches += 1
        sched.step()
        det_m, cva_m, total_m = sums / max(batches, 1)
        history.append({"epoch": epoch, "det": det_m, "cva": cva_m, "total": total_m})
        _append_loss_row(out_dir / "loss.csv", history[-1], header=epoch == 1)
        if progress:
            log.info("epoch %d det %.4f cva %.4f total %.4f (%.0fs)", epoch, det_m, cva_m, total_m,
                     time.time() - start)
        if total_m < best:
            best = total_m
            save_model(model, out_dir / "best.ckpt", {"epoch": epoch, "frame_size": list(frames_hw)})
    save_model(model, out_dir / "final.ckpt", {"epoch": cfg.epochs, "frame_size": list(frames_hw)})
    return {"model": model, "history": history, "seconds": time.time() - start}


def _append_loss_row(path: Path, row: dict, header: bool) -> None:
    # rewritten from scratch on epoch 1, appended afterwards, so a crashed run keeps its curve
    with open(path, "w" if header else "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "det", "cva", "total"])
        if header:
            writer.writeheader()
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def load_training_sequences(data_dir: str | Path) -> list[tuple[np.ndarray, list[MotRow]]]:
    data_dir = Path(data_dir)
    seq_dirs = sorted(p.parent for p in data_dir.rglob("seqinfo.txt") if (p.parent / "gt" / "gt.txt").exists())
    if not seq_dirs:
        raise FileNotFoundError(f"no training sequences with ground truth under {data_dir}")
    return [load_sequence(d) for d in seq_dirs]
