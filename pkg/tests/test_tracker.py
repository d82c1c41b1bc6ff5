import hashlib
import itertools
import math
from collections import Counter

import numpy as np
import pytest
import torch
import torch.nn as nn

from phytrack.ata import OffsetField
from phytrack.fmr import update_memory
from phytrack.head import Detection, HeadOutput
from phytrack.model import ModelConfig, PhyTrackerNet, StepOutput
from phytrack.tracker import OnlineTracker, TrackerConfig, TrackState, associate, track_sequence


class ScriptedNet(nn.Module):
    """Stand-in network: the red channel sampled at stride 4 *is* the heatmap.

    Lets tracker bookkeeping be tested without a trained model. Offsets are a
    constant (ox, oy) field.
    """

    def __init__(self, ox=0.0, oy=0.0):
        super().__init__()
        self.config = ModelConfig(num_classes=1)
        self.ox, self.oy = ox, oy

    def features(self, x):
        return x[:, :1, ::4, ::4].contiguous()

    def detect_only(self, f):
        b, _, h, w = f.shape
        return HeadOutput(f, torch.full((b, 2, h, w), 10.0), torch.zeros(b, 2, h, w))

    def step(self, f_prev, f_cur, omega_prev, heat_prev, memory):
        b, _, h, w = f_cur.shape
        hh, ww = math.ceil(h / 2), math.ceil(w / 2)
        offsets = OffsetField(torch.full((b, hh, ww), self.ox), torch.full((b, hh, ww), self.oy))
        memory = update_memory(memory, offsets)
        return StepOutput(self.detect_only(f_cur), f_cur, torch.zeros(b, 1, hh, ww), offsets, memory=memory)


def frame_with(points, h=64, w=96, value=0.9):
    img = np.zeros((h, w, 3), np.uint8)
    for x, y in points:
        img[y, x, 0] = int(value * 255)
    return img


def det(x, y, score=0.9, cls=0):
    return Detection((x - 5, y - 5, 10, 10), score, cls, (float(x), float(y)))


def track(tid, x, y):
    return TrackState(tid, (x - 5, y - 5, 10, 10), (float(x), float(y)), Counter({0: 1}))


# ---------------------------------------------------------------------------
# config


@pytest.mark.parametrize("kwargs", [dict(score_threshold=0), dict(score_threshold=1.0), dict(gate_radius=-1),
                                    dict(max_age=0), dict(min_hits=0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrackerConfig(**kwargs)


# ---------------------------------------------------------------------------
# association


def test_in_gate_pair_matched():
    offsets = OffsetField(torch.full((1, 4, 4), -2.0), torch.zeros(1, 4, 4))
    m, ud, ut = associate([det(12, 12)], [track(1, 10, 12)], offsets, 30.0)
    assert m == [(0, 0)] and ud == [] and ut == []


def test_out_of_gate_is_unmatched():
    m, ud, ut = associate([det(110, 12)], [track(1, 10, 12)], None, 30.0)
    assert m == [] and ud == [0] and ut == [0]


def test_offset_is_read_at_the_detection_cell():
    ox = torch.zeros(1, 4, 6)
    ox[0, 1, 2] = -9.0  # the cell containing (20, 12) at stride 8
    m, _, _ = associate([det(20, 12), det(40, 30)], [track(1, 11, 12), track(2, 40, 30)],
                        OffsetField(ox, torch.zeros(1, 4, 6)), 3.0)
    assert sorted(m) == [(0, 0), (1, 1)]


def test_greedy_takes_globally_smallest_pair_first():
    rng = np.random.default_rng(5)
    for _ in range(50):
        dets = [det(*rng.uniform(0, 40, 2)) for _ in range(3)]
        tracks = [track(i + 1, *rng.uniform(0, 40, 2)) for i in range(3)]
        m, _, _ = associate(dets, tracks, None, 1e9)
        dist = lambda d, k: math.dist(dets[d].center, tracks[k].last_center)  # noqa: E731
        all_pairs = min(itertools.product(range(3), range(3)), key=lambda p: dist(*p))
        assert all_pairs in m
        # greedy result is a valid one-to-one matching; its total may exceed the optimum
        best = min(sum(dist(d, k) for d, k in zip(range(3), perm)) for perm in itertools.permutations(range(3)))
        assert sum(dist(d, k) for d, k in m) >= best - 1e-9
        assert len({d for d, _ in m}) == len(m) == len({k for _, k in m}) == 3


# ---------------------------------------------------------------------------
# loop and lifecycle


def test_static_object_keeps_one_track():
    net = ScriptedNet()
    tracker = OnlineTracker(net, TrackerConfig(min_hits=1))
    outputs = [tracker.step(frame_with([(40, 20)]), t) for t in (1, 2, 3)]
    assert [len(o) for o in outputs] == [1, 1, 1]
    assert {r.track_id for o in outputs for r in o} == {1}
    assert len(tracker.tracks) == 1 and [h[0] for h in tracker.tracks[0].history] == [1, 2, 3]


def test_min_hits_delays_reporting():
    net = ScriptedNet()
    rows = track_sequence(net, [frame_with([(40, 20)])] * 3, TrackerConfig(min_hits=2))
    assert [r.frame for r in rows] == [2, 3]


def test_empty_frames_report_nothing():
    assert track_sequence(ScriptedNet(), [frame_with([])] * 4) == []


def test_out_of_order_frames_rejected():
    tracker = OnlineTracker(ScriptedNet())
    tracker.step(frame_with([]), 1)
    with pytest.raises(ValueError, match="out-of-order"):
        tracker.step(frame_with([]), 3)


def test_offsets_link_a_fast_mover():
    # 12 px per frame is beyond a 10 px gate unless the offset points back
    frames = [frame_with([(8 + 12 * t, 20)]) for t in range(6)]
    cfg = TrackerConfig(min_hits=1, gate_radius=10.0)
    with_offsets = track_sequence(ScriptedNet(ox=-12.0), frames, cfg)
    without = track_sequence(ScriptedNet(ox=0.0), frames, cfg)
    assert {r.track_id for r in with_offsets} == {1}
    assert len({r.track_id for r in without}) == 6


def test_lost_track_is_retired_and_ids_monotone():
    frames = [frame_with([(40, 20)])] * 3 + [frame_with([])] * 4 + [frame_with([(40, 20)])] * 3
    tracker = OnlineTracker(ScriptedNet(), TrackerConfig(min_hits=1, max_age=3))
    seen = []
    for t, f in enumerate(frames, start=1):
        seen.append([r.track_id for r in tracker.step(f, t)])
        assert all(trk.miss_count <= 3 for trk in tracker.tracks)
    assert seen[:3] == [[1]] * 3 and seen[3:7] == [[]] * 4
    assert seen[7:] == [[2]] * 3  # a new id: the old track was retired, never revived


def test_class_majority_vote():
    trk = TrackState(1, (0, 0, 1, 1), (0.5, 0.5), Counter({2: 3, 1: 3, 0: 1}))
    assert trk.class_id == 1


def _digest(rows):
    return hashlib.sha256("".join(r.to_line() + "\n" for r in rows).encode()).hexdigest()


def test_online_causality_with_random_network():
    torch.manual_seed(0)
    net = PhyTrackerNet(ModelConfig(widths=(4, 8, 8, 8), feature_channels=16, assoc_channels=16,
                                    head_channels=8, num_classes=2))
    with torch.no_grad():
        net.head.heatmap[-1].bias.fill_(0.0)  # enough peaks above threshold to be meaningful
    rng = np.random.default_rng(0)
    frames = [rng.integers(0, 256, (48, 64, 3), dtype=np.uint8) for _ in range(6)]
    cfg = TrackerConfig(score_threshold=0.3, min_hits=1)
    full = []
    track_sequence(net, frames, cfg, on_frame=lambda t, f, rows: full.append(_digest(rows)))
    assert any(d != _digest([]) for d in full)
    for n in range(1, 7):
        part = []
        track_sequence(net, frames[:n], cfg, on_frame=lambda t, f, rows: part.append(_digest(rows)))
        assert part == full[:n]
