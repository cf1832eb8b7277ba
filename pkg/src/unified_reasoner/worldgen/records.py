"""Dataset files: a header record followed by one tensor container per sample."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, List, Sequence, Tuple, Union

import numpy as np

from ..autograd import serialize
from ..codec import Box
from .acre import AcreEpisode, gen_acre_episode
from .cater import VideoSample, gen_cater_episode
from .render import write_png

SPLITS = ("train", "val", "test")
_SPLIT_STRIDE = 100_000_000
Sample = Union[VideoSample, AcreEpisode]


def split_seeds(base_seed: int, split: str, n: int) -> List[int]:
    """Per-sample seeds; each split owns a disjoint block of the integer line."""
    if n > _SPLIT_STRIDE:
        raise ValueError("split too large for the seed layout")
    k = SPLITS.index(split)
    start = base_seed * len(SPLITS) * _SPLIT_STRIDE + k * _SPLIT_STRIDE
    return [start + i for i in range(n)]


def worker_threads() -> int:
    try:
        return max(1, int(os.environ.get("UNIFIED_REASONER_THREADS", "1")))
    except ValueError:
        return 1


def generate(kind: str, seeds: Sequence[int], config, threads: int | None = None) -> List[Sample]:
    fn: Callable = gen_cater_episode if kind == "cater" else gen_acre_episode
    threads = threads or worker_threads()
    if threads == 1:
        return [fn(s, config) for s in seeds]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(lambda s: fn(s, config), seeds))


# ----------------------------------------------------------------------
# (de)serialisation
# ----------------------------------------------------------------------
def sample_to_blob(sample: Sample) -> bytes:
    if isinstance(sample, VideoSample):
        tensors = {
            "frames": sample.frames,
            "boxes": sample.boxes.astype(np.float32),
            "visible": sample.visible.astype(np.uint8),
            "contained_by": sample.contained_by.astype(np.int32),
            "positions": sample.positions.astype(np.float32),
            "shapes": sample.shapes.astype(np.int32),
            "sizes": sample.sizes.astype(np.int32),
            "colors": sample.colors.astype(np.int32),
        }
        meta = {"kind": "cater", "seed": sample.seed, "snitch_cell": sample.snitch_cell,
                "grid": sample.grid}
    else:
        tensors = {"panels": sample.panels, "blicket_mask": sample.blicket_mask.astype(np.uint8)}
        meta = {"kind": "acre", "seed": sample.seed, "context_sets": [list(s) for s in sample.context_sets],
                "lights": list(sample.lights), "query": list(sample.query), "label": sample.label,
                "question_type": sample.question_type,
                "boxes": [[[*b.coords, b.cls] for b in panel] for panel in sample.boxes]}
    return serialize.dumps(tensors, meta, dtype=None)


def blob_to_sample(blob: bytes) -> Sample:
    t, meta = serialize.loads(blob)
    if meta["kind"] == "cater":
        return VideoSample(seed=meta["seed"], frames=t["frames"], boxes=t["boxes"],
                           visible=t["visible"].astype(bool), contained_by=t["contained_by"],
                           positions=t["positions"], shapes=t["shapes"], sizes=t["sizes"],
                           colors=t["colors"], snitch_cell=meta["snitch_cell"], grid=meta["grid"])
    boxes = [[Box(*b[:4], cls=int(b[4])) for b in panel] for panel in meta["boxes"]]
    return AcreEpisode(seed=meta["seed"], panels=t["panels"],
                       context_sets=[tuple(s) for s in meta["context_sets"]], lights=list(meta["lights"]),
                       query=tuple(meta["query"]), blicket_mask=t["blicket_mask"].astype(bool),
                       label=meta["label"], question_type=meta["question_type"], boxes=boxes)


def write_dataset(path: Union[str, Path], samples: Iterable[Sample], header: dict) -> None:
    samples = list(samples)
    head = serialize.dumps({}, dict(header, count=len(samples)), dtype=None)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        serialize.write_record(fh, head)
        for s in samples:
            serialize.write_record(fh, sample_to_blob(s))
    os.replace(tmp, path)


def read_dataset(path: Union[str, Path]) -> Tuple[dict, List[Sample]]:
    with open(path, "rb") as fh:
        records = serialize.read_records(fh)
        try:
            head = next(records)
        except StopIteration:
            raise serialize.FormatError(f"{path}: empty dataset file") from None
        _, header = serialize.loads(head)
        samples = [blob_to_sample(b) for b in records]
    if header.get("count") != len(samples):
        raise serialize.FormatError(f"{path}: header says {header.get('count')} samples, found {len(samples)}")
    return header, samples


def png_dump(directory: Union[str, Path], samples: Sequence[Sample], scale: int = 4) -> List[Path]:
    """Write every frame/panel as ``<seed>_<index>.png`` for inspection."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for s in samples:
        frames = s.frames if isinstance(s, VideoSample) else s.panels
        for i, f in enumerate(frames):
            p = directory / f"{s.seed}_{i:03d}.png"
            write_png(p, f, scale)
            written.append(p)
    return written
