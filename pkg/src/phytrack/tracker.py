"""Online tracking loop: per-frame network step, offset-guided greedy association,
track lifecycle."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import torch

from .fmr import OffsetMemory, update_memory
from .ata import OffsetField
from .head import Detection, decode
from .model import ASSOC_STRIDE, PhyTrackerNet, center_to_assoc
from .motio import MotRow


@dataclass(frozen=True)
class TrackerConfig:
    score_threshold: float = 0.4
    gate_radius: float = 0.0  # 0 -> 2.5x the mean detection diagonal of the frame
    max_age: int = 5
    min_hits: int = 2

    def __post_init__(self):
        if not 0 < self.score_threshold < 1:
            raise ValueError("score_threshold must lie in (0, 1)")
        if self.gate_radius < 0:
            raise ValueError("gate_radius must be positive (or 0 for automatic)")
        if self.max_age < 1:
            raise ValueError("max_age must be >= 1")
        if self.min_hits < 1:
            raise ValueError("min_hits must be >= 1")


@dataclass
class TrackState:
    track_id: int
    last_box: tuple[float, float, float, float]
    last_center: tuple[float, float]
    class_votes: Counter = field(default_factory=Counter)
    miss_count: int = 0
    hits: int = 1
    history: list = field(default_factory=list)  # (frame_index, box, score)

    @property
    def class_id(self) -> int:
        # majority vote, lowest class id on ties
        best = max(self.class_votes.values())
        return min(c for c, n in self.class_votes.items() if n == best)


def _cell_offset(offsets: OffsetField | None, center, grid_hw) -> tuple[float, float]:
    if offsets is None:
        return 0.0, 0.0
    h, w = grid_hw
    j = min(max(int(center[0] // ASSOC_STRIDE), 0), w - 1)
    i = min(max(int(center[1] // ASSOC_STRIDE), 0), h - 1)
    return float(offsets.ox[..., i, j]), float(offsets.oy[..., i, j])


def associate(detections: list[Detection], tracks: list[TrackState], offsets: OffsetField | None,
              gate_radius: float):
    """Greedy nearest-neighbour matching of offset-predicted previous positions.

    Returns (matches [(det_idx, track_idx)], unmatched_dets, unmatched_tracks).
    """
    if offsets is not None:
        ox = offsets.ox.reshape(offsets.ox.shape[-2:])
        oy = offsets.oy.reshape(offsets.oy.shape[-2:])
        offsets = OffsetField(ox, oy)
        grid_hw = tuple(ox.shape)
    else:
        grid_hw = (1, 1)
    pairs = []
    for d, det in enumerate(detections):
        dx, dy = _cell_offset(offsets, det.center, grid_hw)
        px, py = det.center[0] + dx, det.center[1] + dy
        for k, trk in enumerate(tracks):
            dist = math.hypot(px - trk.last_center[0], py - trk.last_center[1])
            if dist <= gate_radius:
                pairs.append((dist, d, k))
    pairs.sort()
    used_d, used_t = set(), set()
    matches = []
    for dist, d, k in pairs:
        if d in used_d or k in used_t:
            continue
        used_d.add(d)
        used_t.add(k)
        matches.append((d, k))
    unmatched_d = [d for d in range(len(detections)) if d not in used_d]
    unmatched_t = [k for k in range(len(tracks)) if k not in used_t]
    return matches, unmatched_d, unmatched_t


@dataclass
class _Cache:
    feature: torch.Tensor
    omega: torch.Tensor | None
    heat: torch.Tensor  # stride-8 class-agnostic heatmap


class OnlineTracker:
    """Processes frames strictly in order; outputs for frame t are final once returned."""

    def __init__(self, model: PhyTrackerNet, config: TrackerConfig | None = None):
        self.model = model.eval()
        self.config = config or TrackerConfig()
        self.reset()

    def reset(self) -> None:
        self.frame_index = 0
        self.tracks: list[TrackState] = []
        self.next_id = 1
        self.memory = OffsetMemory(mode=self.model.config.memory_mode)
        self._cache: _Cache | None = None
        self.last_offsets: OffsetField | None = None

    @torch.no_grad()
    def step(self, frame: np.ndarray | torch.Tensor, frame_index: int | None = None) -> list[MotRow]:
        """Consume one (H, W, 3) uint8 frame; returns the MOT rows reported for it."""
        expected = self.frame_index + 1
        if frame_index is not None and frame_index != expected:
            raise ValueError(f"out-of-order frame: expected {expected}, got {frame_index}")
        self.frame_index = expected
        if isinstance(frame, np.ndarray):
            x = torch.from_numpy(np.ascontiguousarray(frame)).float().div(255.0).permute(2, 0, 1)[None]
        else:
            x = frame if frame.dim() == 4 else frame[None]
        img_hw = tuple(x.shape[-2:])
        f_cur = self.model.features(x)
        if self._cache is None:
            out = self.model.detect_only(f_cur)
            omega = None
            offsets = None
            h8, w8 = math.ceil(f_cur.shape[-2] / 2), math.ceil(f_cur.shape[-1] / 2)
            zero = f_cur.new_zeros(1, h8, w8)
            self.memory = update_memory(self.memory, OffsetField(zero, zero))
        else:
            res = self.model.step(self._cache.feature, f_cur, self._cache.omega, self._cache.heat, self.memory)
            out, omega, offsets = res.head, res.omega, res.offsets
            self.memory = res.memory
        self._cache = _Cache(f_cur, omega, center_to_assoc(out.center))
        self.last_offsets = offsets
        dets = decode(out, self.config.score_threshold, image_size=img_hw)
        return self._update_tracks(dets, offsets)

    def _gate(self, dets: list[Detection]) -> float:
        if self.config.gate_radius > 0:
            return self.config.gate_radius
        if not dets:
            return 1.0
        return 2.5 * float(np.mean([math.hypot(d.box[2], d.box[3]) for d in dets]))

    def _update_tracks(self, dets: list[Detection], offsets: OffsetField | None) -> list[MotRow]:
        t = self.frame_index
        matches, free_d, free_t = associate(dets, self.tracks, offsets, self._gate(dets))
        for d, k in matches:
            trk, det = self.tracks[k], dets[d]
            trk.last_box, trk.last_center = det.box, det.center
            trk.class_votes[det.class_id] += 1
            trk.miss_count = 0
            trk.hits += 1
            trk.history.append((t, det.box, det.score))
        for k in free_t:
            self.tracks[k].miss_count += 1
        for d in free_d:
            det = dets[d]
            if det.score < self.config.score_threshold:
                continue
            trk = TrackState(self.next_id, det.box, det.center, Counter({det.class_id: 1}))
            trk.history.append((t, det.box, det.score))
            self.tracks.append(trk)
            self.next_id += 1
        self.tracks = [trk for trk in self.tracks if trk.miss_count < self.config.max_age]
        rows = []
        for trk in sorted(self.tracks, key=lambda s: s.track_id):
            if trk.miss_count == 0 and trk.hits >= self.config.min_hits:
                _, box, score = trk.history[-1]
                rows.append(MotRow(t, trk.track_id, *box, conf=score, class_id=trk.class_id, visibility=1.0))
        return rows


def track_sequence(model: PhyTrackerNet, frames, config: TrackerConfig | None = None,
                   on_frame=None) -> list[MotRow]:
    tracker = OnlineTracker(model, config)
    rows = []
    for t, frame in enumerate(frames, start=1):
        step_rows = tracker.step(frame, t)
        if on_frame is not None:
            on_frame(t, frame, step_rows)
        rows.extend(step_rows)
    return rows
