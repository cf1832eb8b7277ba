"""Mini-ACRE: blicket-detector panels with an exact causal oracle.

An episode shows six context panels (an object set on a platform whose
strip is lit or dark) and one query panel whose strip is neutral. A panel
lights iff it holds at least one blicket. Labels come only from
:func:`acre_oracle`, which enumerates every blicket assignment consistent
with the contexts.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import FrozenSet, List, Sequence, Tuple

import numpy as np

from ..codec import Box
from .render import RenderConfig, SceneObject, mask_box, object_mask, render_frame

QUESTION_TYPES = ("direct", "indirect", "screen_off", "backward_blocking")
ON, OFF, UNDET = "ON", "OFF", "UNDET"

STRIP_ON = (1.0, 0.9, 0.25)
STRIP_OFF = (0.08, 0.08, 0.10)
STRIP_QUERY = (0.45, 0.55, 0.85)


@dataclass(frozen=True)
class AcreConfig:
    image_size: int = 32
    vocab_size: int = 8           # distinct (shape, color) identities
    objects_per_episode: Tuple[int, int] = (3, 4)
    objects_per_panel: Tuple[int, int] = (1, 3)
    contexts: int = 6
    blicket_prob: float = 0.5
    type_freqs: Tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    max_tries: int = 1000

    def identity(self, obj: int) -> Tuple[int, int]:
        """(shape, color) for an object id; shapes exclude the snitch."""
        return obj % 4, obj // 4

    def validate(self) -> None:
        if self.vocab_size > 16:
            raise ValueError("at most 16 object identities (enumeration bound)")
        lo, hi = self.objects_per_panel
        if not 1 <= lo <= hi <= 3:
            raise ValueError("objects_per_panel must lie within [1, 3]")
        if abs(sum(self.type_freqs) - 1.0) > 1e-9 or len(self.type_freqs) != 4:
            raise ValueError("type_freqs must be four probabilities summing to 1")


class CorruptEpisodeError(ValueError):
    pass


def acre_oracle(contexts: Sequence[Tuple[Sequence[int], bool]], query: Sequence[int]) -> str:
    """ON / OFF / UNDET for ``query`` given (object set, light) contexts."""
    objects = sorted({o for objs, _ in contexts for o in objs} | set(query))
    if len(objects) > 16:
        raise ValueError(f"{len(objects)} objects exceed the enumeration bound of 16")
    if not query:
        consistent = _consistent(contexts, objects)
        if not consistent.any():
            raise CorruptEpisodeError("no blicket assignment explains the contexts")
        return OFF
    index = {o: i for i, o in enumerate(objects)}
    assign = np.arange(1 << len(objects), dtype=np.int64)
    ok = _consistent(contexts, objects)
    if not ok.any():
        raise CorruptEpisodeError("no blicket assignment explains the contexts")
    qmask = sum(1 << index[o] for o in set(query))
    lit = (assign[ok] & qmask) != 0
    if lit.all():
        return ON
    if not lit.any():
        return OFF
    return UNDET


def _consistent(contexts, objects) -> np.ndarray:
    index = {o: i for i, o in enumerate(objects)}
    assign = np.arange(1 << len(objects), dtype=np.int64)
    ok = np.ones(assign.shape, dtype=bool)
    for objs, light in contexts:
        m = sum(1 << index[o] for o in set(objs))
        ok &= ((assign & m) != 0) == bool(light)
    return ok


def provable_blickets(contexts, objects: Sequence[int]) -> FrozenSet[int]:
    """Objects that are blickets under every consistent assignment."""
    objects = sorted(set(objects) | {o for objs, _ in contexts for o in objs})
    ok = _consistent(contexts, objects)
    assign = np.arange(1 << len(objects), dtype=np.int64)[ok]
    return frozenset(o for i, o in enumerate(objects) if assign.size and ((assign >> i) & 1).all())


def classify_question(contexts, query, label: str) -> str:
    """Question type from episode data alone (first matching rule wins)."""
    q = frozenset(query)
    if any(frozenset(objs) == q for objs, _ in contexts):
        return "direct"
    if label == UNDET and q:
        return "backward_blocking"
    if q & provable_blickets(contexts, query):
        return "screen_off"
    return "indirect"


@dataclass
class AcreEpisode:
    seed: int
    panels: np.ndarray                   # (7, 3, H, W) uint8, query last
    context_sets: List[Tuple[int, ...]]
    lights: List[bool]
    query: Tuple[int, ...]
    blicket_mask: np.ndarray             # (vocab_size,) bool
    label: str
    question_type: str
    boxes: List[List[Box]] = field(default_factory=list)  # per panel

    @property
    def contexts(self) -> List[Tuple[Tuple[int, ...], bool]]:
        return list(zip(self.context_sets, self.lights))


def _draw_episode(rng: np.random.Generator, cfg: AcreConfig):
    lo, hi = cfg.objects_per_episode
    m = int(rng.integers(lo, hi + 1))
    objs = sorted(int(o) for o in rng.choice(cfg.vocab_size, size=m, replace=False))
    blickets = {o for o in objs if rng.random() < cfg.blicket_prob}
    plo, phi = cfg.objects_per_panel
    sets = []
    for _ in range(cfg.contexts):
        k = int(rng.integers(plo, min(phi, m) + 1))
        sets.append(tuple(sorted(int(o) for o in rng.choice(objs, size=k, replace=False))))
    lights = [any(o in blickets for o in s) for s in sets]
    k = int(rng.integers(plo, min(phi, m) + 1))
    query = tuple(sorted(int(o) for o in rng.choice(objs, size=k, replace=False)))
    return objs, blickets, sets, lights, query


def render_panel(objs: Sequence[int], strip: Tuple[float, float, float], cfg: AcreConfig,
                 rng: np.random.Generator) -> Tuple[np.ndarray, List[Box]]:
    """Objects in a row above a coloured platform strip."""
    n = cfg.image_size
    rcfg = RenderConfig(image_size=n)
    slots = rng.permutation(3)[: len(objs)]
    scene = []
    for i, (o, slot) in enumerate(zip(objs, slots)):
        shape, color = cfg.identity(o)
        y = 0.52 + rng.uniform(-0.04, 0.04)
        x = (slot + 0.5) / 3 + rng.uniform(-0.03, 0.03)
        scene.append(SceneObject(i, shape, 1, color, (y, x)))
    masks = {o.id: object_mask(o, rcfg) for o in scene}
    img, _ = render_frame(scene, rcfg, masks)
    rows = slice(int(round(n * 0.8)), n)
    img[:, rows, :] = np.clip(np.floor(np.array(strip) * 255 + 0.5), 0, 255).astype(np.uint8)[:, None, None]
    boxes = [Box(*mask_box(masks[o.id]), cls=o.shape) for o in scene]
    return img, boxes


def gen_acre_episode(seed: int, config: AcreConfig = AcreConfig()) -> AcreEpisode:
    config.validate()
    rng = np.random.default_rng(seed)
    want = QUESTION_TYPES[int(rng.choice(4, p=np.asarray(config.type_freqs)))]
    for _ in range(config.max_tries):
        objs, blickets, sets, lights, query = _draw_episode(rng, config)
        contexts = list(zip(sets, lights))
        label = acre_oracle(contexts, query)
        qtype = classify_question(contexts, query, label)
        if qtype == want:
            break
    else:
        raise RuntimeError(f"could not realise question type {want!r} in {config.max_tries} tries")

    panels = np.zeros((config.contexts + 1, 3, config.image_size, config.image_size), dtype=np.uint8)
    boxes = []
    for i, (s, lit) in enumerate(contexts):
        panels[i], b = render_panel(s, STRIP_ON if lit else STRIP_OFF, config, rng)
        boxes.append(b)
    panels[-1], b = render_panel(query, STRIP_QUERY, config, rng)
    boxes.append(b)
    mask = np.zeros(config.vocab_size, dtype=bool)
    mask[list(blickets)] = True
    return AcreEpisode(seed=seed, panels=panels, context_sets=list(sets), lights=list(lights),
                       query=tuple(query), blicket_mask=mask, label=label, question_type=qtype,
                       boxes=boxes)


def config_dict(config: AcreConfig) -> dict:
    d = asdict(config)
    d["objects_per_episode"] = list(config.objects_per_episode)
    d["objects_per_panel"] = list(config.objects_per_panel)
    d["type_freqs"] = list(config.type_freqs)
    return d
