"""Independent reference implementations used only by the tests."""

from __future__ import annotations

import itertools
from typing import Dict, List, Sequence, Tuple


def brute_acre(contexts: Sequence[Tuple[Sequence[int], bool]], query: Sequence[int]) -> str:
    """ON/OFF/UNDET by listing every blicket assignment as a dict."""
    objects = sorted({o for objs, _ in contexts for o in objs} | set(query))
    worlds: List[Dict[int, bool]] = []
    for bits in itertools.product((False, True), repeat=len(objects)):
        world = dict(zip(objects, bits))
        if all(any(world[o] for o in objs) == bool(light) for objs, light in contexts):
            worlds.append(world)
    if not worlds:
        raise ValueError("inconsistent contexts")
    lit = [any(w[o] for o in query) for w in worlds]
    if all(lit):
        return "ON"
    if not any(lit):
        return "OFF"
    return "UNDET"


def brute_question_type(contexts, query, label: str) -> str:
    objects = sorted({o for objs, _ in contexts for o in objs} | set(query))
    worlds = [dict(zip(objects, bits)) for bits in itertools.product((False, True), repeat=len(objects))]
    worlds = [w for w in worlds if all(any(w[o] for o in objs) == bool(l) for objs, l in contexts)]
    if any(sorted(set(objs)) == sorted(set(query)) for objs, _ in contexts):
        return "direct"
    if label == "UNDET" and query:
        return "backward_blocking"
    if any(all(w[o] for w in worlds) for o in query):
        return "screen_off"
    return "indirect"


def even_indices_brute(T: int, n: int) -> List[int]:
    """Evenly spaced indices with both endpoints: the ideal positions i*(T-1)/(n-1), each
    rounded half-up, found by scanning every frame for the nearest one (ties to the later)."""
    if n == 1:
        return [T - 1]
    out = []
    for i in range(n):
        ideal = i * (T - 1) / (n - 1)
        best = min(range(T), key=lambda t: (abs(t - ideal), -t))
        out.append(best)
    return out


def brute_iou(a, b) -> float:
    """IoU by rasterising both boxes on a fine grid (boxes on a 1/64 lattice are exact)."""
    import numpy as np

    g = (np.arange(640) + 0.5) / 640
    ma = (g[:, None] >= a[0]) & (g[:, None] < a[2]) & (g[None, :] >= a[1]) & (g[None, :] < a[3])
    mb = (g[:, None] >= b[0]) & (g[:, None] < b[2]) & (g[None, :] >= b[1]) & (g[None, :] < b[3])
    u = (ma | mb).sum()
    return float((ma & mb).sum() / u) if u else 0.0


def brute_ap_curve(flags_sorted: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated AP by explicit loops: at every recall step take the
    best precision achieved at that recall or beyond."""
    tp = fp = 0
    points = []
    for f in flags_sorted:
        tp += bool(f)
        fp += not f
        points.append((tp / n_gt, tp / (tp + fp)))
    ap, prev_r = 0.0, 0.0
    for r, _ in points:
        if r > prev_r:
            best = max(p for rr, p in points if rr >= r)
            ap += (r - prev_r) * best
            prev_r = r
    return ap


def brute_box_iou(a, b) -> float:
    iy = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ix = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iy * ix
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def brute_optimal_ap50(dets, gts, threshold: float = 0.5) -> float:
    """Single-frame AP50 under the best of all valid one-to-one matchings.

    dets: [(box, cls, score)], gts: [(box, cls)]. Every partial injective map
    from detections to same-class ground truths with IoU >= threshold is
    tried; the AP (mean over classes with ground truth) is maximised.
    """
    n_gt: Dict[int, int] = {}
    for _, c in gts:
        n_gt[c] = n_gt.get(c, 0) + 1
    if not n_gt:
        raise ValueError("no ground truth")
    options = []
    for box, cls, _ in dets:
        ok = [j for j, (g, gc) in enumerate(gts) if gc == cls and brute_box_iou(box, g) >= threshold]
        options.append([None] + ok)
    order = sorted(range(len(dets)), key=lambda i: -dets[i][2])
    best = -1.0
    for choice in itertools.product(*options):
        used = [c for c in choice if c is not None]
        if len(used) != len(set(used)):
            continue
        aps = []
        for cls, n in sorted(n_gt.items()):
            flags = [choice[i] is not None for i in order if dets[i][1] == cls]
            aps.append(brute_ap_curve(flags, n))
        best = max(best, sum(aps) / len(aps))
    return best


def brute_best_flags(dets, gts, threshold: float = 0.5) -> List[bool]:
    """TP flags (input order) of the valid one-to-one matching whose flags, read in
    descending-score order, are lexicographically largest."""
    options = []
    for box, cls, _ in dets:
        ok = [j for j, (g, gc) in enumerate(gts) if gc == cls and brute_box_iou(box, g) >= threshold]
        options.append([None] + ok)
    order = sorted(range(len(dets)), key=lambda i: -dets[i][2])
    best_key, best = None, [False] * len(dets)
    for choice in itertools.product(*options):
        used = [c for c in choice if c is not None]
        if len(used) != len(set(used)):
            continue
        key = tuple(choice[i] is not None for i in order)
        if best_key is None or key > best_key:
            best_key, best = key, [c is not None for c in choice]
    return best
