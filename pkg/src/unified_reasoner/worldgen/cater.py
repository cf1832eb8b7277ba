"""Mini-CATER: shell-game videos with a snitch, cones and containment.

Objects sit near grid-cell centres and move in segments of piecewise-linear
motion. A cone may travel onto a smaller object and swallow it; the
contained object then disappears and rides along with the cone until an
uncover event drops it in place. Apart from cover/uncover pairs, planned
motions never bring two objects close enough to overlap, so visibility is
governed by containment (and the brief approach of a covering cone).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..codec import Box
from .render import CONE, SNITCH, RenderConfig, SceneObject, mask_box, object_mask, render_frame


@dataclass(frozen=True)
class CaterConfig:
    grid: int = 4
    frames: int = 32
    image_size: int = 32
    min_objects: int = 3
    max_objects: int = 6
    max_cones: int = 2
    segment_len: int = 8
    move_prob: float = 0.6
    cover_prob: float = 0.35
    snitch_size: int = 0
    cone_size: int = 2
    jitter: float = 0.08  # fraction of a cell
    size_table: Tuple[float, ...] = (2.2, 3.0, 3.8)

    def render_config(self) -> RenderConfig:
        return RenderConfig(image_size=self.image_size, size_table=self.size_table)

    def validate(self) -> None:
        if self.cover_prob > 0 and self.cone_size <= self.snitch_size:
            raise ValueError("cones must be strictly larger than the snitch when cover_prob > 0")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if self.frames < 1 or self.segment_len < 2:
            raise ValueError("frames >= 1 and segment_len >= 2 required")
        if self.grid < 1:
            raise ValueError("grid must be positive")


@dataclass
class VideoSample:
    """Rendered video plus exact per-frame annotations.

    ``boxes`` are amodal (the object's full extent, even when hidden);
    ``visible`` marks uncontained objects whose rendered pixels still span
    at least 90% (IoU) of that box.
    """

    seed: int
    frames: np.ndarray          # (T, 3, H, W) uint8
    boxes: np.ndarray           # (T, N, 4) float32, ymin xmin ymax xmax
    visible: np.ndarray         # (T, N) bool
    contained_by: np.ndarray    # (T, N) int32, -1 when free
    positions: np.ndarray       # (T, N, 2) float32
    shapes: np.ndarray          # (N,) int32
    sizes: np.ndarray           # (N,) int32
    colors: np.ndarray          # (N,) int32
    snitch_cell: int
    grid: int

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def snitch_index(self) -> int:
        return int(np.flatnonzero(self.shapes == SNITCH)[0])

    def boxset(self, t: int) -> List[Box]:
        return [Box(*(float(v) for v in self.boxes[t, i]), cls=int(self.shapes[i]),
                    visible=bool(self.visible[t, i])) for i in range(len(self.shapes))]

    def count_all(self) -> int:
        return len(self.shapes)

    def count_unique(self) -> int:
        return len(set(self.shapes.tolist()))

    def snitch_box(self, t: int) -> Tuple[float, ...]:
        return tuple(float(v) for v in self.boxes[t, self.snitch_index])


def cell_of(pos: Sequence[float], grid: int) -> int:
    r = min(int(pos[0] * grid), grid - 1)
    c = min(int(pos[1] * grid), grid - 1)
    return r * grid + c


def _cell_pos(cell: int, grid: int, rng: np.random.Generator, jitter: float) -> Tuple[float, float]:
    r, c = divmod(int(cell), grid)
    j = rng.uniform(-jitter, jitter, size=2)
    return ((r + 0.5 + j[0]) / grid, (c + 0.5 + j[1]) / grid)


def _min_dist(a0, a1, b0, b1) -> float:
    """Minimum distance between two points moving linearly over t in [0, 1]."""
    d0 = np.subtract(a0, b0)
    dd = np.subtract(a1, b1) - d0
    denom = float(dd @ dd)
    t = 0.0 if denom == 0 else float(np.clip(-(d0 @ dd) / denom, 0.0, 1.0))
    return float(np.linalg.norm(d0 + t * dd))


def gen_cater_episode(seed: int, config: CaterConfig = CaterConfig()) -> VideoSample:
    config.validate()
    rng = np.random.default_rng(seed)
    K = config.grid
    rcfg = config.render_config()
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    n_cones = int(rng.integers(1, config.max_cones + 1)) if n >= 2 and config.max_cones > 0 else 0
    n_cones = min(n_cones, n - 1)

    shapes = [SNITCH] + [CONE] * n_cones + [int(s) for s in rng.integers(0, 3, size=n - 1 - n_cones)]
    sizes = [config.snitch_size] + [config.cone_size] * n_cones + \
        [int(s) for s in rng.integers(0, max(config.cone_size, 1), size=n - 1 - n_cones)]
    colors = [-1] + [int(c) for c in rng.integers(0, len(rcfg.palette), size=n - 1)]
    radius = np.array([rcfg.half_extent(s) for s in sizes]) / config.image_size
    margin = 0.5 / config.image_size

    cells = rng.choice(K * K, size=n, replace=n > K * K)
    pos = [_cell_pos(c, K, rng, config.jitter) for c in cells]
    # resolve initial overlaps by re-drawing cells
    for i in range(n):
        for _ in range(50):
            if all(np.hypot(pos[i][0] - pos[j][0], pos[i][1] - pos[j][1]) >= radius[i] + radius[j] + margin
                   for j in range(i)):
                break
            pos[i] = _cell_pos(rng.integers(K * K), K, rng, config.jitter)
    contained: List[Optional[int]] = [None] * n

    T = config.frames
    traj = np.zeros((T, n, 2))
    cont = np.full((T, n), -1, dtype=np.int32)
    seg = config.segment_len
    n_segments = -(-T // seg)

    for s in range(n_segments):
        start = [tuple(p) for p in pos]
        new_contained: Dict[int, int] = {}
        holding = {contained[i]: i for i in range(n) if contained[i] is not None}

        order = list(rng.permutation(n))
        planned: Dict[int, Tuple] = {}

        def clear(i, a0, a1, skip=()):
            for j in range(n):
                if j == i or j in skip or contained[j] is not None:
                    continue
                b0, b1 = planned.get(j, (start[j], start[j]))
                if _min_dist(a0, a1, b0, b1) < radius[i] + radius[j] + margin:
                    return False
            return True

        def try_move(i, a0, skip=()):
            for _ in range(10):
                dest = _cell_pos(rng.integers(K * K), K, rng, config.jitter)
                if clear(i, a0, dest, skip=skip):
                    return dest
            return None

        for i in order:
            i = int(i)
            if contained[i] is not None or i in planned:
                continue
            a0 = start[i]
            choice = None
            if shapes[i] == CONE and i in holding:
                held = holding[i]
                if rng.random() < config.cover_prob:
                    choice = try_move(i, a0, skip=(held,))
                    if choice is not None:
                        # uncover: drop the held object where it is
                        contained[held] = None
                        planned[held] = (a0, a0)
                elif rng.random() < config.move_prob:
                    choice = try_move(i, a0)
            elif shapes[i] == CONE and rng.random() < config.cover_prob:
                cands = [j for j in range(n) if contained[j] is None and shapes[j] != CONE
                         and sizes[j] < sizes[i] and j not in planned and j not in holding.values()]
                if cands:
                    j = int(rng.choice(cands))
                    if clear(i, a0, start[j], skip=(j,)):
                        choice = start[j]
                        planned[j] = (start[j], start[j])
                        new_contained[j] = i
                if choice is None and rng.random() < config.move_prob:
                    choice = try_move(i, a0)
            elif rng.random() < config.move_prob:
                choice = try_move(i, a0)
            planned[i] = (a0, choice if choice is not None else a0)
        for i in range(n):
            if i not in planned and contained[i] is None:
                planned[i] = (start[i], start[i])

        seg_frames = min(seg, T - s * seg)
        for t in range(s * seg, s * seg + seg_frames):
            alpha = 1.0 if seg_frames == 1 else (t - s * seg) / (seg_frames - 1)
            for i in range(n):
                if contained[i] is not None:
                    continue
                a0, a1 = planned[i]
                traj[t, i] = (a0[0] + alpha * (a1[0] - a0[0]), a0[1] + alpha * (a1[1] - a0[1]))
            if t == s * seg + seg_frames - 1:
                for j, c in new_contained.items():
                    contained[j] = c
            for i in range(n):
                if contained[i] is not None:
                    traj[t, i] = traj[t, contained[i]]
                    cont[t, i] = contained[i]
        for i in range(n):
            pos[i] = tuple(traj[s * seg + seg_frames - 1, i])

    shapes_a = np.array(shapes, dtype=np.int32)
    sizes_a = np.array(sizes, dtype=np.int32)
    colors_a = np.array(colors, dtype=np.int32)
    frames = np.zeros((T, 3, config.image_size, config.image_size), dtype=np.uint8)
    boxes = np.zeros((T, n, 4), dtype=np.float32)
    visible = np.zeros((T, n), dtype=bool)
    for t in range(T):
        objs = [SceneObject(i, shapes[i], sizes[i], colors[i], tuple(traj[t, i]),
                            None if cont[t, i] < 0 else int(cont[t, i])) for i in range(n)]
        masks = {o.id: object_mask(o, rcfg) for o in objs}
        frames[t], ids = render_frame(objs, rcfg, masks)
        for o in objs:
            amodal = mask_box(masks[o.id])
            boxes[t, o.id] = amodal
            if o.contained_by is None:
                seen = mask_box(ids == o.id)
                visible[t, o.id] = seen is not None and box_iou(seen, amodal) >= 0.9

    snitch_cell = cell_of(traj[T - 1, 0], K)
    return VideoSample(seed=seed, frames=frames, boxes=boxes, visible=visible, contained_by=cont,
                       positions=traj.astype(np.float32), shapes=shapes_a, sizes=sizes_a,
                       colors=colors_a, snitch_cell=int(snitch_cell), grid=K)


def box_iou(a, b) -> float:
    iy = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ix = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iy * ix
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def sample_frames(num_frames: int, n: int, mode: str, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Frame indices: sorted random subset (train) or evenly spaced (eval)."""
    if n > num_frames:
        raise ValueError(f"cannot sample {n} frames from {num_frames}")
    if n < 1:
        raise ValueError("need at least one frame")
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode sampling needs an rng")
        return np.sort(rng.choice(num_frames, size=n, replace=False))
    if mode == "eval":
        if n == 1:
            return np.array([num_frames - 1])
        return np.floor(np.arange(n) * (num_frames - 1) / (n - 1) + 0.5).astype(np.int64)
    raise ValueError(f"unknown sampling mode {mode!r}")


def config_dict(config: CaterConfig) -> dict:
    d = asdict(config)
    d["size_table"] = list(config.size_table)
    return d
