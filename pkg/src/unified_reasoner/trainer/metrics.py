"""Box overlap, greedy detection matching and AP50."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

BoxT = Tuple[float, float, float, float]


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of (ymin, xmin, ymax, xmax) boxes; 0 when the union is empty."""
    ih = min(a[2], b[2]) - max(a[0], b[0])
    iw = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(0.0, ih) * max(0.0, iw)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def score_order(scores: Sequence[float]) -> List[int]:
    """Indices by descending score; ties keep input order."""
    return sorted(range(len(scores)), key=lambda i: -scores[i])


def match_assignments(dets: Sequence[Tuple[BoxT, int, float]], gts: Sequence[Tuple[BoxT, int]],
                      threshold: float = 0.5) -> List[int]:
    """Index of the ground truth each detection claims, or -1 (input order).

    Detections are visited by descending score; each claims the unmatched
    same-class ground truth with the highest IoU, provided IoU >= threshold.
    """
    claim = [-1] * len(dets)
    taken = [False] * len(gts)
    for i in score_order([d[2] for d in dets]):
        box, cls, _ = dets[i]
        best, best_j = -1.0, -1
        for j, (g, gc) in enumerate(gts):
            if taken[j] or gc != cls:
                continue
            v = iou(box, g)
            if v >= threshold and v > best:
                best, best_j = v, j
        if best_j >= 0:
            taken[best_j] = True
            claim[i] = best_j
    return claim


def match_frame(dets: Sequence[Tuple[BoxT, int, float]], gts: Sequence[Tuple[BoxT, int]],
                threshold: float = 0.5) -> List[bool]:
    """TP flag per detection (input order), under the greedy rule of :func:`match_assignments`."""
    return [c >= 0 for c in match_assignments(dets, gts, threshold)]


def average_precision(tp_sorted: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated AP for flags already sorted by descending score."""
    if n_gt == 0:
        raise ValueError("average precision needs at least one ground truth")
    tp = np.asarray(tp_sorted, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, tp.size + 1)
    recall = ctp / n_gt
    # precision envelope, right to left
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * env))


@dataclass
class APResult:
    ap50: float
    per_class: Dict[int, float] = field(default_factory=dict)
    flag: str = ""                   # "empty" when there is nothing to score
    num_detections: int = 0
    num_ground_truth: int = 0


def ap50(frames: Sequence[Tuple[Sequence[Tuple[BoxT, int, float]], Sequence[Tuple[BoxT, int]]]],
         threshold: float = 0.5) -> APResult:
    """Pooled AP over frames of (detections, ground truths), averaged over classes with ground truth."""
    pooled: Dict[int, List[Tuple[float, int, int, bool]]] = {}
    n_gt: Dict[int, int] = {}
    n_det = 0
    for f, (dets, gts) in enumerate(frames):
        flags = match_frame(dets, gts, threshold)
        for i, ((_, cls, score), tp) in enumerate(zip(dets, flags)):
            pooled.setdefault(cls, []).append((score, f, i, tp))
        for _, cls in gts:
            n_gt[cls] = n_gt.get(cls, 0) + 1
        n_det += len(dets)
    total_gt = sum(n_gt.values())
    if total_gt == 0:
        return APResult(1.0 if n_det == 0 else 0.0, flag="empty", num_detections=n_det)
    per_class = {}
    for cls in sorted(n_gt):
        entries = sorted(pooled.get(cls, []), key=lambda e: (-e[0], e[1], e[2]))
        per_class[cls] = average_precision([e[3] for e in entries], n_gt[cls])
    return APResult(float(np.mean(list(per_class.values()))), per_class, "", n_det, total_gt)
