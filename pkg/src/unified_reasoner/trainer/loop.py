"""Training loop, checkpoints and the metrics log."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import autograd as T
from ..autograd import serialize
from ..autograd.optim import OptimState, adam_apply
from ..codec import Vocab
from ..model import ModelConfig, UnifiedModel, decoder_inputs
from .schedule import Schedule
from .tasks import TaskSpec, build_target, draw_items, stack_frames

log = logging.getLogger(__name__)


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    total_steps: int = 3500
    warmup_steps: int = 210
    base_lr: float = 3e-4
    weight_decay: float = 0.05
    seed: int = 0
    eval_every: int = 500
    eval_size: int = 64
    log_every: int = 50
    frames_per_sample: int = 8
    grid: int = 4
    num_slots: int = 1
    backbone: str = "conv-stem"

    def validate(self) -> None:
        for name in ("batch_size", "total_steps", "eval_every", "eval_size", "log_every",
                     "frames_per_sample", "grid", "num_slots"):
            if getattr(self, name) <= 0:
                raise TrainError(f"train.{name} must be positive")
        if self.base_lr <= 0:
            raise TrainError("train.base_lr must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise TrainError(f"warmup {self.warmup_steps} outside [0, {self.total_steps}]")

    def phase_optim(self, start: int, end: int) -> OptimState:
        """Fresh optimiser for a phase; warmup scales with the phase's share of the run."""
        span = end - start
        warm = int(round(self.warmup_steps * span / self.total_steps))
        return OptimState(base_lr=self.base_lr, warmup_steps=warm, total_steps=span + 1,
                          weight_decay=self.weight_decay)


def masked_seq_loss(logits: T.Tensor, target: np.ndarray, mask: np.ndarray) -> T.Tensor:
    """Mean token cross-entropy over positions where ``mask`` is true."""
    if not np.asarray(mask).any():
        raise TrainError("masked_seq_loss: mask selects no positions")
    return T.cross_entropy(logits, target, mask)


class MetricsLog:
    """Append-only (step, task, metric, value) records, mirrored to a JSONL file."""

    def __init__(self, path: Optional[Path] = None):
        self.records: List[dict] = []
        self.path = Path(path) if path else None
        if self.path is not None and self.path.exists():
            with open(self.path) as fh:
                self.records = [json.loads(line) for line in fh if line.strip()]

    def append(self, step: int, task: str, metric: str, value: float) -> None:
        rec = {"step": int(step), "task": task, "metric": metric, "value": float(value)}
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def truncate(self, step: int) -> None:
        """Drop records newer than ``step`` (used when resuming from an older checkpoint)."""
        self.records = [r for r in self.records if r["step"] <= step]
        if self.path is not None:
            with open(self.path, "w") as fh:
                for r in self.records:
                    fh.write(json.dumps(r, sort_keys=True) + "\n")

    def series(self, task: str, metric: str) -> List[Tuple[int, float]]:
        return [(r["step"], r["value"]) for r in self.records if r["task"] == task and r["metric"] == metric]


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------
def save_checkpoint(path, model: UnifiedModel, optim: Optional[OptimState], meta: dict) -> None:
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    names = [k for k, _ in model.named_parameters()]
    if optim is not None and optim.m:
        tensors.update({f"adam_m/{k}": m for k, m in zip(names, optim.m)})
        tensors.update({f"adam_v/{k}": v for k, v in zip(names, optim.v)})
    meta = dict(meta, model_config=model.cfg.to_dict(),
                optim=None if optim is None else optim.hyper())
    serialize.save(path, tensors, meta, dtype=None)


def load_checkpoint(path) -> Tuple[UnifiedModel, Optional[OptimState], dict]:
    try:
        tensors, meta = serialize.load(path)
    except FileNotFoundError:
        raise TrainError(f"checkpoint not found: {path}") from None
    cfg = ModelConfig.from_dict(meta["model_config"])
    model = UnifiedModel(cfg, seed=0)
    model.load_state_dict({k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")})
    optim = None
    if meta.get("optim") is not None:
        optim = OptimState(**meta["optim"])
        names = [k for k, _ in model.named_parameters()]
        if f"adam_m/{names[0]}" in tensors:
            optim.m = [tensors[f"adam_m/{k}"].copy() for k in names]
            optim.v = [tensors[f"adam_v/{k}"].copy() for k in names]
    return model, optim, meta


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------
@dataclass
class TrainResult:
    model: UnifiedModel
    optim: OptimState
    log: MetricsLog
    step: int
    task_steps: Dict[str, int] = field(default_factory=dict)
    losses: List[float] = field(default_factory=list)


def step_loss(model: UnifiedModel, active: Sequence[TaskSpec], datasets: Dict[str, Sequence], vocab: Vocab,
              cfg: TrainConfig, step: int) -> Tuple[T.Tensor, Dict[str, float]]:
    """Weighted loss for one step; tasks sharing a view share the batch and the memory."""
    groups: Dict[Tuple[str, str], List[TaskSpec]] = {}
    for t in active:
        groups.setdefault((t.domain, t.view), []).append(t)
    total = None
    parts: Dict[str, float] = {}
    max_objects = model.cfg.max_objects
    for (domain, view), tasks in groups.items():
        samples = datasets.get(domain)
        if not samples:
            raise TrainError(f"no {domain!r} training data for tasks {[t.name for t in tasks]}")
        items = draw_items(samples, view, cfg.batch_size, step, cfg.seed, cfg.frames_per_sample)
        memory = model.encode_video(stack_frames(samples, view, items))
        for task in tasks:
            targets = [build_target(task, samples[i], idx, vocab, max_objects).ids for i, idx in items]
            prompt = vocab.prompt(task.name.upper())
            inputs, labels, mask = decoder_inputs([prompt] * len(items), targets, vocab)
            loss = masked_seq_loss(model.decoder(memory, inputs), labels, mask)
            parts[task.name] = float(loss.data)
            weighted = T.scale(loss, task.weight)
            total = weighted if total is None else T.add(total, weighted)
    return total, parts


def train(cfg: TrainConfig, schedule: Schedule, model: UnifiedModel, datasets: Dict[str, Sequence],
          vocab: Vocab, out_dir: Optional[Path] = None, val_sets: Optional[Dict[str, Sequence]] = None,
          resume: Optional[Path] = None, stop_at: Optional[int] = None,
          evaluator: Optional[Callable[[UnifiedModel, TaskSpec, Sequence], Dict[str, float]]] = None,
          ) -> TrainResult:
    """Run ``schedule`` for ``cfg.total_steps`` steps.

    Batches, frame draws and the optimiser phase are pure functions of
    (seed, step), so a run resumed from any checkpoint is bitwise identical
    to an uninterrupted one. ``stop_at`` ends the run early (after
    checkpointing) to exercise exactly that.
    """
    cfg.validate()
    schedule.validate(cfg.total_steps)
    if model.cfg.slots.num_slots != cfg.num_slots or model.cfg.encoder.backbone != cfg.backbone:
        raise TrainError("train config (slots/backbone) disagrees with the model config")
    if vocab.num_cells != cfg.grid ** 2:
        raise TrainError(f"vocabulary has {vocab.num_cells} cells but grid is {cfg.grid}")
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    metrics = MetricsLog(out_dir / "metrics.jsonl" if out_dir else None)
    params = model.parameters()
    phases = schedule.phases(cfg.total_steps)
    start = 0
    optim = None
    if resume is not None:
        loaded, optim, meta = load_checkpoint(resume)
        model.load_state_dict(loaded.state_dict())
        start = int(meta["step"])
        if meta.get("seed") != cfg.seed:
            raise TrainError(f"checkpoint seed {meta.get('seed')} != config seed {cfg.seed}")
        metrics.truncate(start)
    counts = {t.name: 0 for t in schedule.tasks}
    # steps already taken count towards the realised schedule
    for s in range(start):
        for t in schedule.active(s):
            counts[t.name] += 1
    losses: List[float] = []
    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    t0 = time.time()
    step = start
    for step in range(start, end):
        phase = next(p for p in phases if p[0] <= step < p[1])
        if step == phase[0] or optim is None:
            if optim is None and step != phase[0]:
                raise TrainError("resuming mid-phase requires optimiser state in the checkpoint")
            optim = cfg.phase_optim(*phase)
        active = schedule.active(step)
        loss, parts = step_loss(model, active, datasets, vocab, cfg, step)
        grads = T.grad(loss, params)
        lr = adam_apply(params, grads, optim)
        losses.append(float(loss.data))
        for t in active:
            counts[t.name] += 1
        if step % cfg.log_every == 0 or step == cfg.total_steps - 1:
            for name, v in parts.items():
                metrics.append(step, name, "loss", v)
            metrics.append(step, "all", "lr", lr)
            log.info("step %d loss %.4f lr %.2e (%.1fs)", step, losses[-1], lr, time.time() - t0)
        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.total_steps:
            if val_sets and evaluator is not None:
                for t in {t.name: t for t in active}.values():
                    vs = val_sets.get(t.domain)
                    if vs:
                        for k, v in evaluator(model, t, vs[: cfg.eval_size]).items():
                            metrics.append(done, t.name, k, v)
            if out_dir:
                _write_ckpt(out_dir / "checkpoint.urt", model, optim, cfg, schedule, vocab, done)
    step = end
    if out_dir and stop_at is not None and end < cfg.total_steps:
        _write_ckpt(out_dir / "checkpoint.urt", model, optim, cfg, schedule, vocab, end)
    return TrainResult(model, optim, metrics, step, counts, losses)


def _write_ckpt(path, model, optim, cfg, schedule, vocab, step) -> None:
    meta = {"step": step, "seed": cfg.seed, "train_config": asdict(cfg),
            "schedule": schedule.to_dict(), "vocab": vocab.layout()}
    save_checkpoint(path, model, optim, meta)
