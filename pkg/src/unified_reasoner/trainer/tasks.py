"""Task registry: which visual input each task reads and how its target is built.

Every task reads one of four *views* of a sample:

``frame``    one CATER frame (detection)
``clip``     ``n`` sorted CATER frames (snitch cell, counts, snitch box)
``panel``    one ACRE panel (detection, counts)
``episode``  all seven ACRE panels, query last

Batches are drawn per view from counter-based RNG streams keyed by
``(seed, view, step)``, so any step's batch can be rebuilt without replaying
the run. Tasks sharing a view in the same step share the batch and the
encoded memory.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..codec import Box, TokenSeq, Vocab, target_for
from ..worldgen.cater import VideoSample, sample_frames
from ..worldgen.render import frames_to_float

VIEWS = ("frame", "clip", "panel", "episode")

REGISTRY: Dict[Tuple[str, str], str] = {
    ("detect_all", "cater"): "frame",
    ("detect_visible", "cater"): "frame",
    ("probe", "cater"): "frame",
    ("count_all", "cater"): "clip",
    ("count_unique", "cater"): "clip",
    ("snitch", "cater"): "clip",
    ("cater", "cater"): "clip",
    ("detect_all", "acre"): "panel",
    ("detect_visible", "acre"): "panel",
    ("probe", "acre"): "panel",
    ("count_all", "acre"): "panel",
    ("count_unique", "acre"): "panel",
    ("acre", "acre"): "episode",
}

DEFAULT_DOMAIN = {"cater": "cater", "acre": "acre", "snitch": "cater"}


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    name: str
    domain: str = "cater"
    weight: float = 1.0

    def __post_init__(self):
        if (self.name, self.domain) not in REGISTRY:
            raise TaskError(f"no registered task {self.name!r} on {self.domain!r} data")

    @property
    def view(self) -> str:
        return REGISTRY[(self.name, self.domain)]

    def to_dict(self) -> dict:
        return {"name": self.name, "domain": self.domain, "weight": self.weight}


def make_task(name: str, domain: str | None = None, weight: float = 1.0) -> TaskSpec:
    return TaskSpec(name, domain or DEFAULT_DOMAIN.get(name, "cater"), weight)


Item = Tuple[int, Tuple[int, ...]]  # (sample index, frame/panel indices)


def view_frames(sample, view: str, idx: Sequence[int]) -> np.ndarray:
    src = sample.frames if isinstance(sample, VideoSample) else sample.panels
    return src[list(idx)]


def build_target(task: TaskSpec, sample, idx: Sequence[int], vocab: Vocab, max_objects: int) -> TokenSeq:
    name = task.name
    if task.domain == "cater":
        t = idx[-1]
        if name in ("detect_all", "detect_visible", "probe"):
            return target_for(name, sample.boxset(t), vocab, max_objects)
        if name == "cater":
            return target_for(name, sample.snitch_cell, vocab, max_objects)
        if name == "count_all":
            return target_for(name, sample.count_all(), vocab, max_objects)
        if name == "count_unique":
            return target_for(name, sample.count_unique(), vocab, max_objects)
        if name == "snitch":
            return target_for(name, sample.snitch_box(t), vocab, max_objects)
    else:
        if name == "acre":
            return target_for(name, sample.label, vocab, max_objects)
        boxes: List[Box] = sample.boxes[idx[-1]]
        if name in ("detect_all", "detect_visible", "probe"):
            return target_for(name, boxes, vocab, max_objects)
        if name == "count_all":
            return target_for(name, len(boxes), vocab, max_objects)
        if name == "count_unique":
            return target_for(name, len({b.cls for b in boxes}), vocab, max_objects)
    raise TaskError(f"cannot build target for {task}")


def _num_views(sample, view: str) -> int:
    if view in ("frame", "clip"):
        return sample.frames.shape[0]
    return sample.panels.shape[0]


def train_indices(sample, view: str, n_frames: int, rng: np.random.Generator) -> Tuple[int, ...]:
    if view == "frame":
        return (int(rng.integers(sample.frames.shape[0])),)
    if view == "clip":
        return tuple(int(i) for i in sample_frames(sample.frames.shape[0], n_frames, "train", rng))
    if view == "panel":
        return (int(rng.integers(sample.panels.shape[0])),)
    return tuple(range(sample.panels.shape[0]))


def eval_items(samples: Sequence, view: str, n_frames: int, per_sample: int = 1) -> List[Item]:
    """Deterministic evaluation items: evenly spaced frames/panels per sample."""
    items: List[Item] = []
    for i, s in enumerate(samples):
        total = _num_views(s, view)
        if view == "clip":
            items.append((i, tuple(int(t) for t in sample_frames(total, n_frames, "eval"))))
        elif view == "episode":
            items.append((i, tuple(range(total))))
        else:
            for t in sample_frames(total, min(per_sample, total), "eval"):
                items.append((i, (int(t),)))
    return items


def draw_items(samples: Sequence, view: str, batch_size: int, step: int, seed: int,
               n_frames: int) -> List[Item]:
    """Batch for ``step``: samples walk a per-epoch permutation, frames are drawn per step."""
    n = len(samples)
    if n == 0:
        raise TaskError(f"no samples available for view {view!r}")
    vid = VIEWS.index(view)
    frame_rng = np.random.default_rng([seed, vid, 1, step])
    items = []
    perms: Dict[int, np.ndarray] = {}
    for b in range(batch_size):
        pos = step * batch_size + b
        epoch, k = divmod(pos, n)
        if epoch not in perms:
            perms[epoch] = np.random.default_rng([seed, vid, 0, epoch]).permutation(n)
        i = int(perms[epoch][k])
        items.append((i, train_indices(samples[i], view, n_frames, frame_rng)))
    return items


def stack_frames(samples: Sequence, view: str, items: Sequence[Item]) -> np.ndarray:
    """(B, F, 3, H, W) float32 in [0, 1]."""
    return frames_to_float(np.stack([view_frames(samples[i], view, idx) for i, idx in items]))
