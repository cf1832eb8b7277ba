"""Shared token vocabulary and task <-> token-sequence mapping.

Every task is phrased as "prompt token, then a target sequence ending in
EOS". Detection targets are groups of five tokens
``[ymin, xmin, ymax, xmax, CLASS]`` with coordinates quantised into ``bins``
levels; reasoning targets are a single answer token.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

CONTROL = ("PAD", "BOS", "EOS")
PROMPTS = ("DETECT_ALL", "DETECT_VISIBLE", "COUNT_ALL", "COUNT_UNIQUE", "SNITCH", "CATER", "ACRE", "PROBE")
ANSWERS = ("ON", "OFF", "UNDET")
TASKS = tuple(p.lower() for p in PROMPTS)
DETECTION_TASKS = ("detect_all", "detect_visible")


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Disjoint id ranges: control, prompts, answers, coords, classes, cells, counts."""

    bins: int = 64
    num_classes: int = 5
    num_cells: int = 36
    count_max: int = 10
    _offsets: Dict[str, Tuple[int, int]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.bins < 2:
            raise CodecError("need at least 2 coordinate bins")
        sizes = [("control", len(CONTROL)), ("prompt", len(PROMPTS)), ("answer", len(ANSWERS)),
                 ("coord", self.bins), ("class", self.num_classes), ("cell", self.num_cells),
                 ("count", self.count_max + 1)]
        offsets, start = {}, 0
        for role, n in sizes:
            offsets[role] = (start, start + n)
            start += n
        object.__setattr__(self, "_offsets", offsets)

    @property
    def size(self) -> int:
        return self._offsets["count"][1]

    def ranges(self) -> Dict[str, Tuple[int, int]]:
        return dict(self._offsets)

    def _id(self, role: str, index: int) -> int:
        lo, hi = self._offsets[role]
        if not 0 <= index < hi - lo:
            raise CodecError(f"{role} index {index} out of range [0, {hi - lo})")
        return lo + index

    @property
    def pad(self) -> int:
        return 0

    @property
    def bos(self) -> int:
        return 1

    @property
    def eos(self) -> int:
        return 2

    def prompt(self, name: str) -> int:
        return self._id("prompt", PROMPTS.index(name))

    def answer(self, name: str) -> int:
        return self._id("answer", ANSWERS.index(name))

    def coord(self, b: int) -> int:
        return self._id("coord", b)

    def cls(self, c: int) -> int:
        return self._id("class", c)

    def cell(self, k: int) -> int:
        return self._id("cell", k)

    def count(self, n: int) -> int:
        return self._id("count", n)

    def role(self, token: int) -> Tuple[str, int]:
        """(role, index within role) for a token id."""
        for role, (lo, hi) in self._offsets.items():
            if lo <= token < hi:
                return role, token - lo
        raise CodecError(f"token id {token} outside vocabulary of size {self.size}")

    def describe(self, token: int) -> str:
        role, i = self.role(token)
        names = {"control": CONTROL, "prompt": PROMPTS, "answer": ANSWERS}
        if role in names:
            return names[role][i]
        return f"{role.upper()}_{i}"

    def layout(self) -> Dict[str, object]:
        return {"bins": self.bins, "num_classes": self.num_classes, "num_cells": self.num_cells,
                "count_max": self.count_max, "size": self.size,
                "ranges": {k: list(v) for k, v in self._offsets.items()}}

    @classmethod
    def from_layout(cls, layout: Dict[str, object]) -> "Vocab":
        v = cls(bins=layout["bins"], num_classes=layout["num_classes"],
                num_cells=layout["num_cells"], count_max=layout["count_max"])
        if v.size != layout.get("size", v.size):
            raise CodecError("vocabulary layout does not match its declared size")
        return v


@dataclass
class TokenSeq:
    ids: List[int]
    probs: Optional[List[float]] = None
    hit_max_len: bool = False

    def __post_init__(self):
        self.ids = [int(i) for i in self.ids]
        if self.probs is not None:
            if len(self.probs) != len(self.ids):
                raise CodecError("probs and ids differ in length")
            if any(not 0.0 <= p <= 1.0 for p in self.probs):
                raise CodecError("probabilities must lie in [0, 1]")

    def __len__(self):
        return len(self.ids)


@dataclass(frozen=True)
class Box:
    ymin: float
    xmin: float
    ymax: float
    xmax: float
    cls: int
    visible: bool = True

    def __post_init__(self):
        for v in (self.ymin, self.xmin, self.ymax, self.xmax):
            if not 0.0 <= v <= 1.0:
                raise CodecError(f"box coordinate {v} outside [0, 1]")
        if self.ymin > self.ymax or self.xmin > self.xmax:
            raise CodecError(f"inverted box {self.coords}")

    @property
    def coords(self) -> Tuple[float, float, float, float]:
        return (self.ymin, self.xmin, self.ymax, self.xmax)


BoxSet = List[Box]


@dataclass
class Detection:
    box: Tuple[float, float, float, float]
    cls: int
    score: float
    reordered: bool = False


@dataclass
class DecodeReport:
    detections: List[Detection]
    issues: List[str] = field(default_factory=list)
    terminated: bool = False


# ----------------------------------------------------------------------
# coordinates
# ----------------------------------------------------------------------
def quantize(x: float, bins: int) -> int:
    """round(x * (bins - 1)) with ties away from zero; clamps out-of-range x."""
    if bins < 2:
        raise CodecError("need at least 2 bins")
    if not 0.0 <= x <= 1.0:
        warnings.warn(f"coordinate {x} outside [0, 1]; clamping", stacklevel=2)
        x = min(max(x, 0.0), 1.0)
    return int(math.floor(x * (bins - 1) + 0.5))


def dequantize(b: int, bins: int) -> float:
    return b / (bins - 1)


# ----------------------------------------------------------------------
# encoders
# ----------------------------------------------------------------------
def prompt_for(task: str, vocab: Vocab) -> TokenSeq:
    if task not in TASKS:
        raise CodecError(f"unknown task {task!r}; expected one of {TASKS}")
    return TokenSeq([vocab.prompt(task.upper())])


def encode_detection(boxes: Sequence[Box], mode: str, max_objects: int, vocab: Vocab,
                     rng: Optional[np.random.Generator] = None) -> TokenSeq:
    """Boxes -> [y0 x0 y1 x1 CLASS]* EOS, sorted by (ymin, xmin, class).

    Passing ``rng`` shuffles the object order instead of sorting.
    """
    if mode not in ("all", "visible"):
        raise CodecError(f"unknown detection mode {mode!r}")
    if len(boxes) > max_objects:
        raise CodecError(f"{len(boxes)} objects exceed max_objects={max_objects}")
    chosen = [b for b in boxes if mode == "all" or b.visible]
    groups = []
    for b in chosen:
        q = [quantize(v, vocab.bins) for v in b.coords]
        groups.append((q[0], q[1], b.cls, q[2], q[3]))
    if rng is None:
        groups.sort()
    else:
        groups = [groups[i] for i in rng.permutation(len(groups))]
    ids = []
    for y0, x0, c, y1, x1 in groups:
        ids += [vocab.coord(y0), vocab.coord(x0), vocab.coord(y1), vocab.coord(x1), vocab.cls(c)]
    ids.append(vocab.eos)
    return TokenSeq(ids)


def cell_index(row: int, col: int, grid: int) -> int:
    if not (0 <= row < grid and 0 <= col < grid):
        raise CodecError(f"cell ({row}, {col}) outside {grid}x{grid} grid")
    return row * grid + col


def encode_answer(task: str, label, vocab: Vocab) -> TokenSeq:
    """Reasoning / counting / snitch targets."""
    if task == "cater":
        k = int(label)
        if not 0 <= k < vocab.num_cells:
            raise CodecError(f"cell {k} outside vocabulary with {vocab.num_cells} cells")
        return TokenSeq([vocab.cell(k), vocab.eos])
    if task == "acre":
        if label not in ANSWERS:
            raise CodecError(f"ACRE label must be one of {ANSWERS}, got {label!r}")
        return TokenSeq([vocab.answer(label), vocab.eos])
    if task in ("count_all", "count_unique"):
        n = int(label)
        if not 0 <= n <= vocab.count_max:
            raise CodecError(f"count {n} outside [0, {vocab.count_max}]")
        return TokenSeq([vocab.count(n), vocab.eos])
    if task == "snitch":
        coords = tuple(label.coords) if isinstance(label, Box) else tuple(label)
        if len(coords) != 4 or any(not 0.0 <= v <= 1.0 for v in coords):
            raise CodecError(f"snitch box must be 4 values in [0, 1], got {coords}")
        return TokenSeq([vocab.coord(quantize(v, vocab.bins)) for v in coords] + [vocab.eos])
    raise CodecError(f"task {task!r} has no answer encoding")


# ----------------------------------------------------------------------
# decoders
# ----------------------------------------------------------------------
def decode_detection(seq: TokenSeq, vocab: Vocab) -> DecodeReport:
    """Greedy 5-token group parser; never raises on malformed input."""
    ids = list(seq.ids)
    probs = seq.probs
    start = 1 if ids and ids[0] == vocab.bos else 0
    dets: List[Detection] = []
    issues: List[str] = []
    i = start
    terminated = False
    while i < len(ids):
        if ids[i] == vocab.eos:
            terminated = True
            break
        group = ids[i:i + 5]
        roles = []
        for t in group:
            try:
                roles.append(vocab.role(t)[0])
            except CodecError:
                roles.append("invalid")
        eos_at = next((j for j, t in enumerate(group) if t == vocab.eos), None)
        if eos_at is not None or len(group) < 5:
            issues.append("truncated group")
            terminated = eos_at is not None
            break
        if roles[:4] != ["coord"] * 4 or roles[4] != "class":
            issues.append(f"malformed group at position {i}")
            break
        bins = [vocab.role(t)[1] for t in group[:4]]
        y0, x0, y1, x1 = (dequantize(b, vocab.bins) for b in bins)
        reordered = y0 > y1 or x0 > x1
        if reordered:
            y0, y1 = min(y0, y1), max(y0, y1)
            x0, x1 = min(x0, x1), max(x0, x1)
            issues.append(f"inverted coordinates at position {i}")
        score = 1.0 if probs is None else float(probs[i + 4])
        dets.append(Detection((y0, x0, y1, x1), vocab.role(group[4])[1], score, reordered))
        i += 5
    return DecodeReport(dets, issues, terminated)


def decode_answer(task: str, seq: TokenSeq, vocab: Vocab):
    """Value of the first emitted token for single-answer tasks, or None if it has the wrong role."""
    ids = [t for t in seq.ids if t != vocab.bos]
    if task == "snitch":
        try:
            roles = [vocab.role(t) for t in ids[:4]]
        except CodecError:
            return None
        if len(roles) < 4 or any(r != "coord" for r, _ in roles):
            return None
        c = [dequantize(i, vocab.bins) for _, i in roles]
        return (min(c[0], c[2]), min(c[1], c[3]), max(c[0], c[2]), max(c[1], c[3]))
    if not ids:
        return None
    try:
        role, idx = vocab.role(ids[0])
    except CodecError:
        return None
    want = {"cater": "cell", "acre": "answer", "count_all": "count", "count_unique": "count"}[task]
    if role != want:
        return None
    return ANSWERS[idx] if role == "answer" else idx


def target_for(task: str, sample_label, vocab: Vocab, max_objects: int) -> TokenSeq:
    """Dispatch helper used by the trainer's task registry."""
    if task in DETECTION_TASKS or task == "probe":
        mode = "visible" if task == "detect_visible" else "all"
        return encode_detection(sample_label, mode, max_objects, vocab)
    return encode_answer(task, sample_label, vocab)


def max_target_len(max_objects: int) -> int:
    return 5 * max_objects + 1

