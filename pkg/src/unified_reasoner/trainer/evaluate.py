"""Task metrics over generated sequences.

The ``evaluate_*`` functions accept anything with a
``predict(frames, prompt_ids, vocab, max_len) -> List[TokenSeq]`` method, so
scripted predictors can be scored exactly like a trained model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from ..codec import TokenSeq, Vocab, decode_answer, decode_detection, max_target_len
from ..worldgen.acre import QUESTION_TYPES
from .metrics import APResult, ap50, iou
from .tasks import Item, TaskSpec, build_target, eval_items, make_task, stack_frames


@dataclass
class AccuracyResult:
    accuracy: float
    n: int
    invalid: int = 0                       # first token had the wrong role
    per_type: Dict[str, float] = field(default_factory=dict)
    per_type_n: Dict[str, int] = field(default_factory=dict)

    def as_metrics(self) -> Dict[str, float]:
        out = {"accuracy": self.accuracy, "invalid": float(self.invalid)}
        out.update({f"accuracy/{k}": v for k, v in self.per_type.items()})
        return out


def run_predictions(model, task: TaskSpec, samples: Sequence, items: Sequence[Item], vocab: Vocab,
                    max_objects: int, batch_size: int = 64) -> List[TokenSeq]:
    prompt = vocab.prompt(task.name.upper())
    out: List[TokenSeq] = []
    max_len = max_target_len(max_objects)
    for start in range(0, len(items), batch_size):
        chunk = items[start: start + batch_size]
        frames = stack_frames(samples, task.view, chunk)
        out.extend(model.predict(frames, [prompt] * len(chunk), vocab, max_len))
    return out


def score_answers(task: str, preds: Sequence[TokenSeq], labels: Sequence, vocab: Vocab,
                  groups: Optional[Sequence[str]] = None) -> AccuracyResult:
    hits, invalid = [], 0
    for p, y in zip(preds, labels):
        v = decode_answer(task, p, vocab)
        invalid += v is None
        hits.append(v is not None and v == y)
    acc = sum(hits) / len(hits) if hits else 0.0
    res = AccuracyResult(acc, len(hits), invalid)
    if groups is not None:
        for g in sorted(set(groups)):
            sel = [h for h, gg in zip(hits, groups) if gg == g]
            res.per_type[g] = sum(sel) / len(sel)
            res.per_type_n[g] = len(sel)
    return res


def evaluate_cater(model, samples: Sequence, vocab: Vocab, n_frames: int = 8,
                   max_objects: int = 6, batch_size: int = 64) -> AccuracyResult:
    """Top-1 snitch-cell accuracy with evenly spaced frames."""
    task = make_task("cater")
    items = eval_items(samples, "clip", n_frames)
    preds = run_predictions(model, task, samples, items, vocab, max_objects, batch_size)
    return score_answers("cater", preds, [samples[i].snitch_cell for i, _ in items], vocab)


def evaluate_acre(model, samples: Sequence, vocab: Vocab, max_objects: int = 6,
                  batch_size: int = 64) -> AccuracyResult:
    """Overall and per-question-type accuracy."""
    task = make_task("acre")
    items = eval_items(samples, "episode", 0)
    preds = run_predictions(model, task, samples, items, vocab, max_objects, batch_size)
    labels = [samples[i].label for i, _ in items]
    res = score_answers("acre", preds, labels, vocab, [samples[i].question_type for i, _ in items])
    for q in QUESTION_TYPES:
        res.per_type.setdefault(q, float("nan"))
        res.per_type_n.setdefault(q, 0)
    return res


def evaluate_counts(model, task: TaskSpec, samples: Sequence, vocab: Vocab, n_frames: int = 8,
                    max_objects: int = 6, batch_size: int = 64) -> AccuracyResult:
    items = eval_items(samples, task.view, n_frames)
    preds = run_predictions(model, task, samples, items, vocab, max_objects, batch_size)
    labels = [decode_answer(task.name, build_target(task, samples[i], idx, vocab, max_objects), vocab)
              for i, idx in items]
    return score_answers(task.name, preds, labels, vocab)


def evaluate_snitch(model, samples: Sequence, vocab: Vocab, n_frames: int = 8,
                    max_objects: int = 6, batch_size: int = 64) -> AccuracyResult:
    """Fraction of clips whose predicted snitch box has IoU >= 0.5 with the truth."""
    task = make_task("snitch")
    items = eval_items(samples, "clip", n_frames)
    preds = run_predictions(model, task, samples, items, vocab, max_objects, batch_size)
    hits, invalid = 0, 0
    for p, (i, idx) in zip(preds, items):
        box = decode_answer("snitch", p, vocab)
        if box is None:
            invalid += 1
        elif iou(box, samples[i].snitch_box(idx[-1])) >= 0.5:
            hits += 1
    return AccuracyResult(hits / len(items) if items else 0.0, len(items), invalid)


def detection_frames(preds: Sequence[TokenSeq], gts: Sequence[Sequence], vocab: Vocab):
    frames = []
    for p, g in zip(preds, gts):
        dets = [(d.box, d.cls, d.score) for d in decode_detection(p, vocab).detections]
        frames.append((dets, [(b.coords, b.cls) for b in g]))
    return frames


def ground_truth_boxes(task: TaskSpec, sample, idx: Sequence[int]):
    boxes = sample.boxset(idx[-1]) if task.domain == "cater" else sample.boxes[idx[-1]]
    if task.name == "detect_visible":
        boxes = [b for b in boxes if b.visible]
    return boxes


def evaluate_detection(model, task: TaskSpec, samples: Sequence, vocab: Vocab, per_sample: int = 2,
                       max_objects: int = 6, batch_size: int = 64) -> APResult:
    """AP50 over evenly spaced frames (or panels) of every sample."""
    items = eval_items(samples, task.view, 0, per_sample)
    preds = run_predictions(model, task, samples, items, vocab, max_objects, batch_size)
    gts = [ground_truth_boxes(task, samples[i], idx) for i, idx in items]
    return ap50(detection_frames(preds, gts, vocab))


def evaluate_task(model, task: TaskSpec, samples: Sequence, vocab: Vocab, n_frames: int = 8,
                  max_objects: int = 6, batch_size: int = 64) -> Dict[str, float]:
    """Headline metrics for any registered task, as a flat dict."""
    if task.name in ("detect_all", "detect_visible", "probe"):
        r = evaluate_detection(model, task, samples, vocab, max_objects=max_objects, batch_size=batch_size)
        return {"ap50": r.ap50}
    if task.name == "cater":
        return evaluate_cater(model, samples, vocab, n_frames, max_objects, batch_size).as_metrics()
    if task.name == "acre":
        return evaluate_acre(model, samples, vocab, max_objects, batch_size).as_metrics()
    if task.name == "snitch":
        return evaluate_snitch(model, samples, vocab, n_frames, max_objects, batch_size).as_metrics()
    return evaluate_counts(model, task, samples, vocab, n_frames, max_objects, batch_size).as_metrics()
