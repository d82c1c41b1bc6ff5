"""CLEAR-MOT evaluation (MOTA, IDF1, FP, FN, IDs) over MOT rows.

Per frame, correspondences from the previous frame are kept while their IoU
stays at or above the threshold; the remaining pairs are matched by a
maximum-total-IoU assignment over pairs at or above the threshold. A ground
truth object whose matched hypothesis differs from its last matched hypothesis
is an identity switch. IDF1 uses one global identity matching that maximises
the number of identity-true-positive frames.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .motio import MotRow


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class EvalReport:
    num_gt: int
    fp: int
    fn: int
    ids: int
    idtp: int
    num_hyp: int

    @property
    def mota(self) -> float:
        return 1.0 - (self.fp + self.fn + self.ids) / self.num_gt

    @property
    def idf1(self) -> float:
        denom = self.num_gt + self.num_hyp
        return 2.0 * self.idtp / denom if denom else 0.0

    @property
    def idfp(self) -> int:
        return self.num_hyp - self.idtp

    @property
    def idfn(self) -> int:
        return self.num_gt - self.idtp

    def __add__(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.num_gt + other.num_gt, self.fp + other.fp, self.fn + other.fn,
                          self.ids + other.ids, self.idtp + other.idtp, self.num_hyp + other.num_hyp)

    def to_text(self) -> str:
        return (
            f"num_gt={self.num_gt}\nfp={self.fp}\nfn={self.fn}\nids={self.ids}\n"
            f"mota={self.mota:.6f}\nidf1={self.idf1:.6f}\n"
        )


def iou(a, b) -> float:
    """IoU of two (left, top, width, height) boxes."""
    ax1, ay1 = a[0] + a[2], a[1] + a[3]
    bx1, by1 = b[0] + b[2], b[1] + b[3]
    iw = min(ax1, bx1) - max(a[0], b[0])
    ih = min(ay1, by1) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(gt_boxes, hyp_boxes) -> np.ndarray:
    m = np.zeros((len(gt_boxes), len(hyp_boxes)))
    for i, g in enumerate(gt_boxes):
        for j, h in enumerate(hyp_boxes):
            m[i, j] = iou(g, h)
    return m


def _by_frame(rows):
    frames = defaultdict(dict)
    for r in rows:
        frames[r.frame][r.track_id] = r.box
    return frames


def evaluate(gt: list[MotRow], hyp: list[MotRow], iou_threshold: float = 0.5) -> EvalReport:
    if not gt:
        raise EvaluationError("no ground truth: cannot compute MOTA with num_gt = 0")
    gt_f, hyp_f = _by_frame(gt), _by_frame(hyp)
    prev_match: dict[int, int] = {}  # gt id -> hyp id in the previous frame
    last_match: dict[int, int] = {}  # gt id -> last hyp id ever matched
    fp = fn = ids = 0
    num_gt = num_hyp = 0
    idtp_counts: dict[tuple[int, int], int] = defaultdict(int)
    gt_ids, hyp_ids = set(), set()
    for frame in sorted(set(gt_f) | set(hyp_f)):
        g, h = gt_f.get(frame, {}), hyp_f.get(frame, {})
        gids, hids = sorted(g), sorted(h)
        gt_ids.update(gids)
        hyp_ids.update(hids)
        num_gt += len(gids)
        num_hyp += len(hids)
        ious = iou_matrix([g[i] for i in gids], [h[j] for j in hids])
        gi = {gid: n for n, gid in enumerate(gids)}
        hi = {hid: n for n, hid in enumerate(hids)}
        for a, gid in enumerate(gids):
            for b, hid in enumerate(hids):
                if ious[a, b] >= iou_threshold:
                    idtp_counts[(gid, hid)] += 1

        matches: dict[int, int] = {}
        for gid, hid in prev_match.items():
            if gid in gi and hid in hi and ious[gi[gid], hi[hid]] >= iou_threshold:
                matches[gid] = hid
        free_g = [gid for gid in gids if gid not in matches]
        used_h = set(matches.values())
        free_h = [hid for hid in hids if hid not in used_h]
        if free_g and free_h:
            sub = ious[np.ix_([gi[x] for x in free_g], [hi[x] for x in free_h])]
            weight = np.where(sub >= iou_threshold, sub, 0.0)
            rows, cols = linear_sum_assignment(weight, maximize=True)
            for r, c in zip(rows, cols):
                if sub[r, c] >= iou_threshold:
                    matches[free_g[r]] = free_h[c]
        for gid, hid in matches.items():
            if gid in last_match and last_match[gid] != hid:
                ids += 1
            last_match[gid] = hid
        fp += len(hids) - len(matches)
        fn += len(gids) - len(matches)
        prev_match = matches

    idtp = _global_idtp(idtp_counts, sorted(gt_ids), sorted(hyp_ids))
    return EvalReport(num_gt, fp, fn, ids, idtp, num_hyp)


def _global_idtp(counts, gt_ids, hyp_ids) -> int:
    if not gt_ids or not hyp_ids:
        return 0
    m = np.zeros((len(gt_ids), len(hyp_ids)))
    gi = {g: n for n, g in enumerate(gt_ids)}
    hi = {h: n for n, h in enumerate(hyp_ids)}
    for (g, h), n in counts.items():
        m[gi[g], hi[h]] = n
    rows, cols = linear_sum_assignment(m, maximize=True)
    return int(m[rows, cols].sum())


def write_report(report: EvalReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_text(), encoding="utf-8")
    return path
