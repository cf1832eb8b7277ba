import math

import numpy as np
import pytest

from conftest import tiny_config
from unified_reasoner.autograd import tensor as T
from unified_reasoner.codec import TokenSeq, encode_answer
from unified_reasoner.model import UnifiedModel
from unified_reasoner.trainer import (
    MetricsLog,
    Schedule,
    ScheduleError,
    TrainConfig,
    TrainError,
    build_schedule,
    evaluate_acre,
    evaluate_cater,
    evaluate_counts,
    evaluate_detection,
    evaluate_snitch,
    load_checkpoint,
    make_task,
    masked_seq_loss,
    train,
)
from unified_reasoner.trainer.tasks import TaskError, build_target, draw_items, eval_items


def small_cfg(**kw):
    base = dict(batch_size=4, total_steps=6, warmup_steps=1, base_lr=1e-3, eval_every=3, log_every=1,
                frames_per_sample=3, grid=4, num_slots=1)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- loss
def test_uniform_logits_give_log_v():
    V = 37
    loss = masked_seq_loss(T.Tensor(np.zeros((2, 5, V))), np.zeros((2, 5), int), np.ones((2, 5), bool))
    assert float(loss.data) == pytest.approx(math.log(V), rel=1e-6)


def test_confident_correct_logits_give_near_zero():
    logits = np.full((1, 3, 10), -50.0)
    tgt = np.array([[1, 4, 7]])
    logits[0, [0, 1, 2], tgt[0]] = 50.0
    assert float(masked_seq_loss(T.Tensor(logits), tgt, np.ones((1, 3), bool)).data) < 1e-30


def test_loss_ignores_masked_positions():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 6, 9))
    tgt = rng.integers(0, 9, size=(2, 6))
    mask = rng.random((2, 6)) < 0.5
    mask[0, 0] = True
    a = masked_seq_loss(T.Tensor(logits), tgt, mask)
    logits2, tgt2 = logits.copy(), tgt.copy()
    logits2[~mask] = rng.normal(size=(int((~mask).sum()), 9))
    tgt2[~mask] = rng.integers(0, 9, int((~mask).sum()))
    assert float(a.data) == float(masked_seq_loss(T.Tensor(logits2), tgt2, mask).data)


def test_empty_mask_is_error():
    with pytest.raises(TrainError):
        masked_seq_loss(T.Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), int), np.zeros((1, 2), bool))


# ---------------------------------------------------------------- schedules
def test_alternating_example():
    s = Schedule("alternating", [make_task("detect_all"), make_task("cater")], interval=100)
    names = [s.active(k)[0].name for k in range(300)]
    assert names[:100] == ["detect_all"] * 100
    assert names[100:200] == ["cater"] * 100
    assert names[200:] == ["detect_all"] * 100


def test_single_switch_example_counts():
    s = build_schedule("single-switch", "cater", "detect_all", pretrain_steps=5000)
    realised = {"detect_all": 0, "cater": 0}
    for k in range(7000):
        for t in s.active(k):
            realised[t.name] += 1
    assert realised == s.expected_counts(7000) == {"detect_all": 5000, "cater": 2000}
    assert s.active(4999)[0].name == "detect_all" and s.active(5000)[0].name == "cater"


@pytest.mark.parametrize("kind", ["joint", "alternating", "single-switch"])
def test_closed_form_counts_match_enumeration(kind):
    rng = np.random.default_rng(0)
    for _ in range(30):
        total = int(rng.integers(2, 800))
        extra = ["count_all"] if kind != "single-switch" and rng.random() < 0.5 else []
        s = build_schedule(kind, "cater", "detect_all", pretrain_steps=int(rng.integers(1, total)),
                           interval=int(rng.integers(1, 60)), extra=extra)
        realised = {t.name: 0 for t in s.tasks}
        for k in range(total):
            for t in s.active(k):
                realised[t.name] += 1
        assert realised == s.expected_counts(total)


def test_schedule_validation():
    with pytest.raises(ScheduleError):
        build_schedule("single-switch", "cater", "detect_all", pretrain_steps=10).validate(10)
    with pytest.raises(ScheduleError):
        Schedule("alternating", [make_task("cater")], interval=0).validate(5)
    with pytest.raises(ScheduleError):
        Schedule("sometimes", [make_task("cater")]).validate(5)
    s = build_schedule("single-switch", "acre", "detect_visible", pretrain_steps=3)
    assert [t.domain for t in s.tasks] == ["acre", "acre"]
    assert Schedule.from_dict(s.to_dict()) == s


def test_train_config_validation():
    with pytest.raises(TrainError):
        small_cfg(warmup_steps=10).validate()
    with pytest.raises(TrainError):
        small_cfg(batch_size=0).validate()


# ---------------------------------------------------------------- batches and targets
def test_batches_depend_only_on_seed_and_step(cater_small):
    a = draw_items(cater_small, "clip", 5, 17, 3, 4)
    assert a == draw_items(cater_small, "clip", 5, 17, 3, 4)
    assert a != draw_items(cater_small, "clip", 5, 18, 3, 4)
    for _, idx in a:
        assert list(idx) == sorted(set(idx)) and len(idx) == 4


def test_epoch_covers_every_sample(cater_small):
    n = len(cater_small)
    seen = [i for s in range(n // 4) for i, _ in draw_items(cater_small, "frame", 4, s, 0, 1)]
    assert sorted(seen) == list(range(n))


def test_unregistered_task():
    with pytest.raises(TaskError):
        make_task("acre", "cater")


def test_targets_per_view(cater_small, acre_small, vocab):
    v = cater_small[0]
    t = build_target(make_task("cater"), v, (0, 5, 9), vocab, 6)
    assert t.ids == [vocab.cell(v.snitch_cell), vocab.eos]
    det = build_target(make_task("detect_all"), v, (9,), vocab, 6)
    assert len(det.ids) == 5 * v.count_all() + 1
    ep = acre_small[0]
    assert build_target(make_task("acre"), ep, tuple(range(7)), vocab, 6).ids == \
        [vocab.answer(ep.label), vocab.eos]
    cnt = build_target(make_task("count_all", "acre"), ep, (2,), vocab, 6)
    assert cnt.ids == [vocab.count(len(ep.context_sets[2])), vocab.eos]


# ---------------------------------------------------------------- training runs
def _state(model):
    return model.state_dict()


def _same(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


def test_joint_with_zero_weight_matches_single_task(vocab, cater_small):
    cfg = small_cfg()
    r1 = train(cfg, Schedule("none", [make_task("detect_all")]), UnifiedModel(tiny_config(vocab), 5),
               {"cater": cater_small}, vocab)
    for other in ("count_all", "cater"):   # same view (shared memory) and a different view
        joint = Schedule("joint", [make_task("detect_all", weight=1.0), make_task(other, weight=0.0)])
        r2 = train(cfg, joint, UnifiedModel(tiny_config(vocab), 5), {"cater": cater_small}, vocab)
        assert r1.losses == r2.losses
        assert _same(_state(r1.model), _state(r2.model))


@pytest.mark.parametrize("kind,stop", [("none", 2), ("single-switch", 3), ("single-switch", 4),
                                       ("alternating", 5)])
def test_resume_is_bitwise(vocab, cater_small, tmp_path, kind, stop):
    cfg = small_cfg(total_steps=7, eval_every=100)
    sched = build_schedule(kind, "cater", "detect_all", pretrain_steps=3, interval=2)
    full = train(cfg, sched, UnifiedModel(tiny_config(vocab), 1), {"cater": cater_small}, vocab)
    out = tmp_path / "run"
    part = train(cfg, sched, UnifiedModel(tiny_config(vocab), 1), {"cater": cater_small}, vocab,
                 out_dir=out, stop_at=stop)
    assert part.step == stop
    rest = train(cfg, sched, UnifiedModel(tiny_config(vocab), 99), {"cater": cater_small}, vocab,
                 out_dir=out, resume=out / "checkpoint.urt")
    assert part.losses + rest.losses == full.losses
    assert _same(_state(full.model), _state(rest.model))
    assert rest.task_steps == full.task_steps == sched.expected_counts(7)
    steps = [r["step"] for r in MetricsLog(out / "metrics.jsonl").records if r["metric"] == "lr"]
    assert steps == sorted(steps) and len(steps) == len(set(steps)) == 7


def test_checkpoint_contents(vocab, cater_small, tmp_path):
    cfg = small_cfg(total_steps=3, eval_every=3)
    r = train(cfg, Schedule("none", [make_task("cater")]), UnifiedModel(tiny_config(vocab), 0),
              {"cater": cater_small}, vocab, out_dir=tmp_path)
    model, optim, meta = load_checkpoint(tmp_path / "checkpoint.urt")
    assert meta["step"] == 3 and meta["seed"] == 0 and meta["vocab"] == vocab.layout()
    assert _same(_state(model), _state(r.model))
    assert optim.step == 3 and all(np.array_equal(a, b) for a, b in zip(optim.m, r.optim.m))
    with pytest.raises(TrainError):
        load_checkpoint(tmp_path / "missing.urt")


def test_resume_with_other_seed_rejected(vocab, cater_small, tmp_path):
    cfg = small_cfg(total_steps=3)
    sched = Schedule("none", [make_task("cater")])
    train(cfg, sched, UnifiedModel(tiny_config(vocab), 0), {"cater": cater_small}, vocab, out_dir=tmp_path)
    with pytest.raises(TrainError):
        train(small_cfg(total_steps=3, seed=1), sched, UnifiedModel(tiny_config(vocab), 0),
              {"cater": cater_small}, vocab, resume=tmp_path / "checkpoint.urt")


def test_missing_domain_data(vocab, cater_small):
    with pytest.raises(TrainError):
        train(small_cfg(), Schedule("none", [make_task("acre")]), UnifiedModel(tiny_config(vocab), 0),
              {"cater": cater_small}, vocab)


def test_detection_loss_halves_by_step_500(vocab):
    """Learning-dynamics sanity check on a reduced (fast) configuration."""
    from unified_reasoner.worldgen.cater import CaterConfig
    from unified_reasoner.worldgen.records import generate, split_seeds

    data = generate("cater", split_seeds(0, "train", 64), CaterConfig())
    cfg = TrainConfig(batch_size=8, total_steps=500, warmup_steps=30, base_lr=1e-3, eval_every=10 ** 6,
                      log_every=100, frames_per_sample=1)
    model = UnifiedModel(tiny_config(vocab, dim=32), seed=0)
    r = train(cfg, Schedule("none", [make_task("detect_all")]), model, {"cater": data}, vocab)
    first = r.losses[0]
    last = float(np.mean(r.losses[-20:]))
    assert last <= 0.5 * first, (first, last)


# ---------------------------------------------------------------- evaluation with scripted predictors
class Scripted:
    """Predictor returning fixed sequences, in item order."""

    def __init__(self, outputs):
        self.outputs = list(outputs)

    def predict(self, frames, prompt_ids, vocab, max_len):
        out, self.outputs = self.outputs[: len(prompt_ids)], self.outputs[len(prompt_ids):]
        return out


def test_cater_perfect_and_constant(vocab, cater_small):
    perfect = Scripted(encode_answer("cater", s.snitch_cell, vocab) for s in cater_small)
    assert evaluate_cater(perfect, cater_small, vocab, n_frames=4).accuracy == 1.0
    const = Scripted(encode_answer("cater", 0, vocab) for _ in cater_small)
    r = evaluate_cater(const, cater_small, vocab, n_frames=4)
    assert r.accuracy == sum(s.snitch_cell == 0 for s in cater_small) / len(cater_small)
    bad = Scripted(TokenSeq([vocab.answer("ON"), vocab.eos]) for _ in cater_small)
    r = evaluate_cater(bad, cater_small, vocab, n_frames=4)
    assert r.accuracy == 0.0 and r.invalid == len(cater_small)


def test_constant_cell_is_chance_on_uniform_labels(vocab):
    from unified_reasoner.worldgen.cater import CaterConfig
    from unified_reasoner.worldgen.records import generate, split_seeds

    data = generate("cater", split_seeds(3, "test", 160), CaterConfig(frames=8))
    accs = []
    for c in range(16):
        pred = Scripted(encode_answer("cater", c, vocab) for _ in data)
        accs.append(evaluate_cater(pred, data, vocab, n_frames=4).accuracy)
    assert np.mean(accs) == pytest.approx(1 / 16, abs=1e-12)


def test_acre_always_undet_and_oracle(vocab, acre_small):
    undet = Scripted(encode_answer("acre", "UNDET", vocab) for _ in acre_small)
    r = evaluate_acre(undet, acre_small, vocab)
    if r.per_type_n["backward_blocking"]:
        assert r.per_type["backward_blocking"] == 1.0
    direct_on = [i for i, e in enumerate(acre_small) if e.question_type == "direct" and e.label == "ON"]
    assert direct_on and all(acre_small[i].label != "UNDET" for i in direct_on)
    oracle = Scripted(encode_answer("acre", e.label, vocab) for e in acre_small)
    r = evaluate_acre(oracle, acre_small, vocab)
    assert r.accuracy == 1.0 and set(r.per_type) == {"direct", "indirect", "screen_off", "backward_blocking"}


def test_counts_and_snitch(vocab, cater_small):
    task = make_task("count_all")
    pred = Scripted(encode_answer("count_all", s.count_all(), vocab) for s in cater_small)
    assert evaluate_counts(pred, task, cater_small, vocab, n_frames=4).accuracy == 1.0
    items = eval_items(cater_small, "clip", 4)
    pred = Scripted(encode_answer("snitch", cater_small[i].snitch_box(idx[-1]), vocab) for i, idx in items)
    assert evaluate_snitch(pred, cater_small, vocab, n_frames=4).accuracy == 1.0


def test_detection_from_exact_ground_truth(vocab, cater_small):
    from unified_reasoner.codec import encode_detection

    task = make_task("detect_all")
    items = eval_items(cater_small, "frame", 0, 2)
    seqs = []
    for i, (t,) in items:
        s = encode_detection(cater_small[i].boxset(t), "all", 6, vocab)
        s.probs = [1.0] * len(s.ids)
        seqs.append(s)
    assert evaluate_detection(Scripted(seqs), task, cater_small, vocab, per_sample=2).ap50 == 1.0


def test_pretrain_domain_override():
    s = build_schedule("single-switch", "acre", "detect_visible", pretrain_steps=3)
    assert [t.domain for t in s.tasks] == ["acre", "acre"]
    s = build_schedule("single-switch", "acre", "count_all", pretrain_steps=3, pretrain_domain="cater")
    assert [(t.name, t.domain) for t in s.tasks] == [("count_all", "cater"), ("acre", "acre")]
    assert s.tasks[0].view != s.tasks[1].view


def test_cross_domain_single_switch_runs(vocab, cater_small, acre_small):
    cfg = small_cfg(total_steps=4, eval_every=100)
    sched = build_schedule("single-switch", "acre", "detect_visible", pretrain_steps=2, pretrain_domain="cater")
    r = train(cfg, sched, UnifiedModel(tiny_config(vocab), 0), {"cater": cater_small, "acre": acre_small}, vocab)
    assert r.task_steps == {"detect_visible": 2, "acre": 2}
    with pytest.raises(TrainError):
        train(cfg, sched, UnifiedModel(tiny_config(vocab), 0), {"acre": acre_small}, vocab)
