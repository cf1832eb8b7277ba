"""Slot probing: what does each bottleneck token encode?

A trained encoder is frozen; a fresh decoder learns to read detections (or
the snitch box) from one slot vector at a time, the slot being drawn
uniformly per iteration. Reports then decode from every slot separately and
record which ground-truth objects each slot recovers.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as T
from .autograd import Tensor, no_grad, serialize
from .autograd.optim import OptimState, adam_apply
from .codec import Vocab, decode_answer, decode_detection, max_target_len
from .model import Decoder, ModelConfig, UnifiedModel, decoder_inputs, generate
from .trainer.loop import masked_seq_loss
from .trainer.metrics import iou, match_assignments
from .trainer.tasks import build_target, draw_items, eval_items, make_task, stack_frames
from .worldgen.render import SHAPES, SNITCH

PROBE_TASKS = ("detect_all", "detect_visible", "snitch")


class ProbeError(RuntimeError):
    pass


@dataclass
class ProbeConfig:
    task: str = "detect_all"
    steps: int = 500
    batch_size: int = 32
    base_lr: float = 1e-3
    warmup_steps: int = 30
    weight_decay: float = 0.05
    threshold: float = 0.9
    seed: int = 0
    checkpoint: Optional[str] = None
    # optional slot subsets to probe jointly; None means one uniform slot per step
    slot_subsets: Optional[List[List[int]]] = None

    def validate(self, num_slots: int) -> None:
        if self.task not in PROBE_TASKS:
            raise ProbeError(f"probe task must be one of {PROBE_TASKS}, got {self.task!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ProbeError(f"threshold {self.threshold} outside (0, 1)")
        if self.steps < 1 or self.batch_size < 1:
            raise ProbeError("probe steps and batch size must be positive")
        for sub in self.slot_subsets or []:
            if not sub or any(not 0 <= k < num_slots for k in sub):
                raise ProbeError(f"slot subset {sub} invalid for {num_slots} slots")


def slot_choices(cfg: ProbeConfig, num_slots: int, step: int) -> List[int]:
    """Slots conditioning the probe at ``step``; reproducible from the seed."""
    rng = np.random.default_rng([cfg.seed, 0x5107, step])
    if cfg.slot_subsets:
        return list(cfg.slot_subsets[int(rng.integers(len(cfg.slot_subsets)))])
    return [int(rng.integers(num_slots))]


def _target_task(task: str):
    return make_task("probe" if task == "detect_all" else task, "cater")


def _prompt(task: str, vocab: Vocab) -> int:
    return vocab.prompt("SNITCH" if task == "snitch" else "PROBE")


@dataclass
class Probe:
    decoder: Decoder
    config: ProbeConfig
    model_config: ModelConfig
    slot_history: List[List[int]] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)

    def save(self, path, vocab: Vocab) -> None:
        meta = {"probe_config": asdict(self.config), "model_config": self.model_config.to_dict(),
                "vocab": vocab.layout(), "slot_history": self.slot_history}
        serialize.save(path, self.decoder.state_dict(), meta, dtype=None)

    @classmethod
    def load(cls, path) -> "Probe":
        tensors, meta = serialize.load(path)
        mcfg = ModelConfig.from_dict(meta["model_config"])
        dec = Decoder(mcfg, np.random.default_rng(0))
        dec.load_state_dict(tensors)
        return cls(dec, ProbeConfig(**meta["probe_config"]), mcfg, meta.get("slot_history", []))


def frozen_slots(model: UnifiedModel, frames: np.ndarray) -> np.ndarray:
    """(B, S, D) slot vectors for single frames (B, 3, H, W), computed without taping."""
    with no_grad():
        return model.encoder.encode_frame(frames).data


def train_probe(cfg: ProbeConfig, model: UnifiedModel, samples: Sequence, vocab: Vocab) -> Probe:
    """Fit a fresh decoder on single-slot memories of a frozen encoder."""
    s = model.cfg.slots.num_slots
    cfg.validate(s)
    task = _target_task(cfg.task)
    dec = Decoder(model.cfg, np.random.default_rng([cfg.seed, 0xDEC]))
    params = dec.parameters()
    enc_params = model.encoder.parameters()
    optim = OptimState(base_lr=cfg.base_lr, warmup_steps=cfg.warmup_steps, total_steps=cfg.steps + 1,
                       weight_decay=cfg.weight_decay)
    probe = Probe(dec, cfg, model.cfg)
    prompt = _prompt(cfg.task, vocab)
    for step in range(cfg.steps):
        items = draw_items(samples, "frame", cfg.batch_size, step, cfg.seed, 1)
        slots = frozen_slots(model, stack_frames(samples, "frame", items)[:, 0])
        chosen = slot_choices(cfg, s, step)
        memory = Tensor(slots[:, chosen])
        targets = [build_target(task, samples[i], idx, vocab, model.cfg.max_objects).ids for i, idx in items]
        inputs, labels, mask = decoder_inputs([prompt] * len(items), targets, vocab)
        loss = masked_seq_loss(dec(memory, inputs), labels, mask)
        grads = T.grad(loss, params)
        if memory.taped or any(p.grad is not None for p in enc_params):
            raise ProbeError("encoder received gradient during probing")
        adam_apply(params, grads, optim)
        probe.slot_history.append(chosen)
        probe.losses.append(float(loss.data))
    return probe


# ----------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------
@dataclass
class ProbeReport:
    threshold: float
    num_slots: int
    frames: List[dict]                        # per frame: sample, frame, gt, per-slot detections
    tp_by_object: List[List[int]]             # [slot][object id] -> TP count
    coverage: float                           # fraction of GT objects recovered by >= 1 slot
    overlap: List[List[int]]                  # [slot a][slot b] -> objects recovered by both
    num_objects: int

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


def _ground_truth(task: str, sample, t: int) -> List[Tuple[int, Tuple[float, ...], int]]:
    """(object id, box, class) of the objects the probe is asked to find."""
    boxes = sample.boxset(t)
    if task == "snitch":
        k = sample.snitch_index
        return [(k, boxes[k].coords, boxes[k].cls)]
    if task == "detect_visible":
        return [(j, b.coords, b.cls) for j, b in enumerate(boxes) if b.visible]
    return [(j, b.coords, b.cls) for j, b in enumerate(boxes)]


def slot_detections(probe: Probe, model: UnifiedModel, frames: np.ndarray, vocab: Vocab,
                    slots: Optional[Sequence[int]] = None) -> List[List[List[Tuple]]]:
    """[frame][slot] -> list of (box, class, score) decoded from that slot alone."""
    vecs = frozen_slots(model, frames)
    s = vecs.shape[1]
    slots = list(range(s)) if slots is None else list(slots)
    out = [[[] for _ in slots] for _ in range(len(frames))]
    prompt = _prompt(probe.config.task, vocab)
    max_len = 5 if probe.config.task == "snitch" else max_target_len(model.cfg.max_objects)
    for k_i, k in enumerate(slots):
        seqs = generate(probe.decoder, Tensor(vecs[:, [k]]), [prompt] * len(frames), vocab, max_len)
        for f, seq in enumerate(seqs):
            if probe.config.task == "snitch":
                box = decode_answer("snitch", seq, vocab)
                if box is not None:
                    score = float(np.prod(seq.probs[:4]))
                    out[f][k_i].append((tuple(box), SNITCH, score))
            else:
                out[f][k_i] = [(d.box, d.cls, d.score) for d in decode_detection(seq, vocab).detections]
    return out


def probe_report(probe: Probe, model: UnifiedModel, samples: Sequence, vocab: Vocab,
                 threshold: Optional[float] = None, per_sample: int = 1, batch_size: int = 64) -> ProbeReport:
    threshold = probe.config.threshold if threshold is None else threshold
    s = model.cfg.slots.num_slots
    items = eval_items(samples, "frame", 0, per_sample)
    n_obj = model.cfg.max_objects
    tp_by_object = [[0] * n_obj for _ in range(s)]
    overlap = [[0] * s for _ in range(s)]
    frames_out: List[dict] = []
    total_gt, covered = 0, 0
    for start in range(0, len(items), batch_size):
        chunk = items[start: start + batch_size]
        dets = slot_detections(probe, model, stack_frames(samples, "frame", chunk)[:, 0], vocab)
        for (i, idx), per_slot in zip(chunk, dets):
            gt = _ground_truth(probe.config.task, samples[i], idx[0])
            gts = [(b, c) for _, b, c in gt]
            claimed = [set() for _ in range(s)]
            slot_rows = []
            for k, ds in enumerate(per_slot):
                kept = [d for d in ds if d[2] >= threshold]
                claim = match_assignments(kept, gts)
                rows = []
                for (box, cls, score), c in zip(kept, claim):
                    rows.append({"box": [float(v) for v in box], "cls": int(cls), "score": float(score),
                                 "tp": c >= 0, "object": gt[c][0] if c >= 0 else None})
                    if c >= 0:
                        claimed[k].add(gt[c][0])
                        tp_by_object[k][gt[c][0]] += 1
                slot_rows.append(rows)
            for a in range(s):
                for b in range(s):
                    overlap[a][b] += len(claimed[a] & claimed[b])
            total_gt += len(gt)
            covered += len(set().union(*claimed))
            frames_out.append({"sample": int(samples[i].seed), "frame": int(idx[0]),
                               "ground_truth": [{"object": o, "box": list(b), "cls": c} for o, b, c in gt],
                               "slots": slot_rows})
    coverage = covered / total_gt if total_gt else 1.0
    return ProbeReport(threshold, s, frames_out, tp_by_object, coverage, overlap, total_gt)


def snitch_probe_accuracy(probe: Probe, model: UnifiedModel, samples: Sequence, vocab: Vocab,
                          per_sample: int = 2, batch_size: int = 64) -> Dict[str, object]:
    """Fraction of (frame, slot) reads whose snitch box reaches IoU >= 0.5; also per slot."""
    if probe.config.task != "snitch":
        raise ProbeError("snitch accuracy needs a probe trained on the snitch task")
    items = eval_items(samples, "frame", 0, per_sample)
    s = model.cfg.slots.num_slots
    hits = np.zeros(s)
    n = 0
    for start in range(0, len(items), batch_size):
        chunk = items[start: start + batch_size]
        dets = slot_detections(probe, model, stack_frames(samples, "frame", chunk)[:, 0], vocab)
        for (i, idx), per_slot in zip(chunk, dets):
            truth = samples[i].snitch_box(idx[0])
            for k, ds in enumerate(per_slot):
                hits[k] += bool(ds) and iou(ds[0][0], truth) >= 0.5
            n += 1
    per_slot = (hits / max(n, 1)).tolist()
    return {"accuracy": float(np.mean(per_slot)), "per_slot": per_slot, "best_slot": float(max(per_slot)),
            "frames": n}


# ----------------------------------------------------------------------
# overlays
# ----------------------------------------------------------------------
TP_COLOR = (40, 230, 40)
FP_COLOR = (235, 40, 200)


def box_to_pixels(box: Sequence[float], size: int, scale: int) -> Tuple[int, int, int, int]:
    """Normalised (ymin, xmin, ymax, xmax) -> inclusive pixel rectangle (x0, y0, x1, y1)."""
    n = size * scale
    y0, x0 = int(round(box[0] * n)), int(round(box[1] * n))
    y1, x1 = int(round(box[2] * n)) - 1, int(round(box[3] * n)) - 1
    return x0, y0, max(x0, x1), max(y0, y1)


def emit_visualization(frame: np.ndarray, per_slot: Sequence[Sequence[dict]], out_dir,
                       scale: int = 8, report: Optional[dict] = None) -> List[Path]:
    """One overlay per slot (``slot_{i}.png``) plus ``report.json``.

    ``per_slot[i]`` holds dicts with ``box``, ``cls``, ``score`` and ``tp``.
    """
    from PIL import Image, ImageDraw

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ProbeError(f"cannot create {out_dir}: {e}") from e
    base = np.asarray(frame).transpose(1, 2, 0).repeat(scale, axis=0).repeat(scale, axis=1)
    size = frame.shape[-1]
    written = []
    for k, dets in enumerate(per_slot):
        img = Image.fromarray(base.astype(np.uint8))
        draw = ImageDraw.Draw(img)
        for d in dets:
            color = TP_COLOR if d["tp"] else FP_COLOR
            x0, y0, x1, y1 = box_to_pixels(d["box"], size, scale)
            draw.rectangle([x0, y0, x1, y1], outline=color)
            draw.text((x0 + 1, y0 + 1), f"{SHAPES[d['cls']]} {d['score']:.2f}", fill=color)
        path = out_dir / f"slot_{k}.png"
        try:
            img.save(path)
        except OSError as e:
            raise ProbeError(f"cannot write {path}: {e}") from e
        written.append(path)
    rpath = out_dir / "report.json"
    payload = {"slots": [list(d) for d in per_slot]}
    if report:
        payload.update(report)
    try:
        rpath.write_text(json.dumps(payload, indent=1, sort_keys=True))
    except OSError as e:
        raise ProbeError(f"cannot write {rpath}: {e}") from e
    written.append(rpath)
    return written
