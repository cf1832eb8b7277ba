"""Acceptance criteria, one test each, each printing a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` (the lines are also
repeated in the pytest terminal summary). The directional experiments
(criteria 5, 6, 8) train small models from scratch and dominate the runtime.
"""

from __future__ import annotations

import time
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import record_acceptance, tiny_config
from oracles import brute_acre, brute_best_flags, brute_optimal_ap50, brute_question_type
from unified_reasoner.autograd.gradcheck import model_grad_check, run_all
from unified_reasoner.autograd.optim import OptimState, lr_at
from unified_reasoner.codec import Box, TokenSeq, Vocab, decode_detection, encode_detection, quantize
from unified_reasoner.model import DecoderConfig, EncoderConfig, ModelConfig, SlotConfig, UnifiedModel
from unified_reasoner.probe import ProbeConfig, probe_report, snitch_probe_accuracy, train_probe
from unified_reasoner.trainer import (
    Schedule,
    TrainConfig,
    ap50,
    build_schedule,
    evaluate_acre,
    evaluate_cater,
    make_task,
    train,
)
from unified_reasoner.worldgen.acre import AcreConfig, gen_acre_episode
from unified_reasoner.worldgen.cater import CaterConfig
from unified_reasoner.worldgen.records import generate, split_seeds


@contextmanager
def criterion(number: int, title: str, budget_s: float | None = None):
    """Time the body; print PASS/FAIL with details; re-raise assertion failures."""
    info: dict = {}
    t0 = time.time()
    ok = True
    try:
        yield info
    except AssertionError:
        ok = False
        raise
    finally:
        dt = time.time() - t0
        if budget_s is not None and dt > budget_s:
            ok = False
            info["over_budget"] = f"{dt:.0f}s > {budget_s:.0f}s"
        detail = " ".join(f"{k}={v}" for k, v in info.items())
        record_acceptance(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({dt:.1f}s) {detail}")
    assert ok, f"criterion {number} over its runtime budget: {info.get('over_budget')}"


# ---------------------------------------------------------------- 1
def test_c1_autograd_correctness():
    with criterion(1, "finite-difference gradient checks", budget_s=120) as info:
        reports = run_all(tolerance=1e-4, cases=10, seed=0)
        worst = max(r.worst for r in reports)
        e2e = model_grad_check(seed=0, tolerance=1e-3, entries=8)
        info.update(ops=len(reports), cases_per_op=10, worst_op_err=f"{worst:.2e}", e2e_err=f"{e2e.worst:.2e}")
        assert all(len(r.max_rel_err) >= 10 for r in reports)
        assert all(r.passed for r in reports), [(r.name, r.worst) for r in reports if not r.passed]
        assert e2e.worst < 1e-3


# ---------------------------------------------------------------- 2
def test_c2_codec_round_trip_and_fuzz():
    with criterion(2, "codec round trip + malformed-sequence fuzzing", budget_s=60) as info:
        v = Vocab()
        rng = np.random.default_rng(2024)
        tol = 1 / (2 * (v.bins - 1))
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(0, 7))
            boxes = []
            for _ in range(n):
                y, x = np.sort(rng.uniform(0, 1, 2)), np.sort(rng.uniform(0, 1, 2))
                boxes.append(Box(float(y[0]), float(x[0]), float(y[1]), float(x[1]), int(rng.integers(5))))
            rep = decode_detection(encode_detection(boxes, "all", 6, v), v)
            key = lambda b: (quantize(b.ymin, v.bins), quantize(b.xmin, v.bins), b.cls,  # noqa: E731
                             quantize(b.ymax, v.bins), quantize(b.xmax, v.bins))
            ref = sorted(boxes, key=key)
            assert len(rep.detections) == len(ref)
            for b, d in zip(ref, rep.detections):
                assert d.cls == b.cls
                worst = max(worst, float(np.max(np.abs(np.array(d.box) - np.array(b.coords)))))
        assert worst <= tol + 1e-12
        for _ in range(10_000):
            ids = rng.integers(-2, v.size + 2, int(rng.integers(0, 45))).tolist()
            decode_detection(TokenSeq(ids), v)
        info.update(boxsets=1000, max_coord_err=f"{worst:.5f}", bound=f"{tol:.5f}", fuzz=10_000)


# ---------------------------------------------------------------- 3
def test_c3_acre_oracle_exactness():
    with criterion(3, "ACRE labels equal an independent enumeration oracle", budget_s=60) as info:
        cfg = AcreConfig()
        types = {}
        for seed in range(10_000):
            ep = gen_acre_episode(seed, cfg)
            assert ep.label == brute_acre(ep.contexts, ep.query), seed
            assert ep.question_type == brute_question_type(ep.contexts, ep.query, ep.label), seed
            types[ep.question_type] = types.get(ep.question_type, 0) + 1
        info.update(episodes=10_000, types=types)


# ---------------------------------------------------------------- 4
def test_c4_architectural_invariants(tmp_path):
    with criterion(4, "causal mask, per-frame independence, frozen encoder, resume", budget_s=300) as info:
        vocab = Vocab(num_cells=16)
        rng = np.random.default_rng(4)

        # causal mask: perturbing future tokens leaves past logits bitwise unchanged
        model = UnifiedModel(tiny_config(vocab, slots=2), seed=0)
        mem = model.encode_video(rng.random((2, 2, 3, 32, 32)))
        for _ in range(100):
            n = int(rng.integers(3, model.cfg.decoder.max_len + 1))
            ids = rng.integers(0, vocab.size, (2, n))
            t = int(rng.integers(0, n - 1))
            alt = ids.copy()
            alt[:, t + 1:] = rng.integers(0, vocab.size, (2, n - t - 1))
            a = model.decode_teacher_forced(mem, ids).data
            b = model.decode_teacher_forced(mem, alt).data
            assert np.array_equal(a[:, : t + 1], b[:, : t + 1])

        # per-frame slot independence
        for trial in range(100):
            x = rng.random((2, 3, 3, 32, 32)).astype(np.float32)
            j = int(rng.integers(3))
            y = x.copy()
            y[:, j] = rng.random(y[:, j].shape)
            _, s1 = model.encode_video(x, return_slots=True)
            _, s2 = model.encode_video(y, return_slots=True)
            keep = [2 * f + k for f in range(3) if f != j for k in range(2)]
            assert np.array_equal(s1.data[:, keep], s2.data[:, keep])

        cater = generate("cater", split_seeds(4, "train", 16), CaterConfig(frames=8))

        # frozen encoder during probing: 100 probe runs, each compared bitwise
        before = {k: v.copy() for k, v in model.encoder.state_dict().items()}
        for trial in range(100):
            cfg = ProbeConfig(steps=2, batch_size=2, warmup_steps=1, seed=trial,
                              task=("detect_all", "detect_visible", "snitch")[trial % 3])
            train_probe(cfg, model, cater, vocab)
            after = model.encoder.state_dict()
            assert all(np.array_equal(before[k], after[k]) for k in before)

        # resume from a mid-run checkpoint reproduces the uninterrupted run bitwise
        kinds = ("none", "single-switch", "alternating", "joint")
        for trial in range(100):
            kind = kinds[trial % 4]
            total = 5
            cfg = TrainConfig(batch_size=2, total_steps=total, warmup_steps=1, base_lr=1e-3, eval_every=100,
                              log_every=1, frames_per_sample=2, seed=trial)
            sched = build_schedule(kind, "cater", "detect_all", pretrain_steps=int(rng.integers(1, total)),
                                   interval=int(rng.integers(1, 3)))
            stop = int(rng.integers(1, total))
            full = train(cfg, sched, UnifiedModel(tiny_config(vocab), trial), {"cater": cater}, vocab)
            out = tmp_path / f"r{trial}"
            part = train(cfg, sched, UnifiedModel(tiny_config(vocab), trial), {"cater": cater}, vocab,
                         out_dir=out, stop_at=stop)
            rest = train(cfg, sched, UnifiedModel(tiny_config(vocab), 10_000 + trial), {"cater": cater}, vocab,
                         out_dir=out, resume=out / "checkpoint.urt")
            assert part.losses + rest.losses == full.losses
            a, b = full.model.state_dict(), rest.model.state_dict()
            assert all(np.array_equal(a[k], b[k]) for k in a)
            assert all(np.array_equal(m1, m2) for m1, m2 in zip(full.optim.m, rest.optim.m))
        info.update(trials_each=100)


# ---------------------------------------------------------------- 5
C5 = dict(pretrain_steps=1000, reason_steps=800, batch_pre=32, batch_reason=16, lr=1e-3, dim=64,
          n_train=1000, n_test=200)


def c5_model(vocab, seed):
    d = C5["dim"]
    return UnifiedModel(ModelConfig(
        encoder=EncoderConfig(dim=d, depth=2, heads=4, conv_channels=(16, 32, d), conv_strides=(2, 2, 2)),
        slots=SlotConfig(num_slots=1),
        decoder=DecoderConfig(depth=2, heads=4, max_len=33, vocab_size=vocab.size)), seed=seed)


def c5_seed(seed: int):
    vocab = Vocab(num_cells=16)
    cfg = CaterConfig()
    train_set = generate("cater", split_seeds(seed, "train", C5["n_train"]), cfg)
    test_set = generate("cater", split_seeds(seed, "test", C5["n_test"]), cfg)

    def run(steps, batch, schedule, model):
        tc = TrainConfig(batch_size=batch, total_steps=steps, warmup_steps=int(steps * 0.06), base_lr=C5["lr"],
                         eval_every=10 ** 6, log_every=100, seed=seed)
        return train(tc, schedule, model, {"cater": train_set}, vocab).model

    # detect -> reason, one switch; the reasoning phase has the same budget as ground-up
    pre = run(C5["pretrain_steps"], C5["batch_pre"], Schedule("none", [make_task("detect_all")]), c5_model(vocab, seed))
    pre = run(C5["reason_steps"], C5["batch_reason"], Schedule("none", [make_task("cater")]), pre)
    gu = run(C5["reason_steps"], C5["batch_reason"], Schedule("none", [make_task("cater")]), c5_model(vocab, seed))
    return evaluate_cater(pre, test_set, vocab).accuracy, evaluate_cater(gu, test_set, vocab).accuracy


def test_c5_detection_pretraining_beats_ground_up_on_cater():
    with criterion(5, "CATER: detect->reason vs ground-up (ordering)", budget_s=3 * 30 * 60) as info:
        chance = 1 / 16
        wins = 0
        for seed in range(3):
            p, g = c5_seed(seed)
            ok = p > g and p > chance and g > chance and p >= 2 * g
            wins += ok
            info[f"seed{seed}"] = f"pre={p:.3f}/gu={g:.3f}/{'ok' if ok else 'miss'}"
        info["seeds_ok"] = f"{wins}/3"
        assert wins >= 2


# ---------------------------------------------------------------- 6
# both arms pretrain on mini-CATER videos, then switch once to mini-ACRE
C6 = dict(pretrain_steps=1000, reason_steps=1000, batch=16, lr=1e-3, dim=64, n_train=2000, n_cater=1000,
          n_test=300)


def c6_seed(seed: int):
    vocab = Vocab(num_cells=16)
    train_set = generate("acre", split_seeds(seed, "train", C6["n_train"]), AcreConfig())
    test_set = generate("acre", split_seeds(seed, "test", C6["n_test"]), AcreConfig())
    videos = generate("cater", split_seeds(seed, "train", C6["n_cater"]), CaterConfig())
    out = {}
    for pre_task in ("detect_visible", "count_all"):
        total = C6["pretrain_steps"] + C6["reason_steps"]
        tc = TrainConfig(batch_size=C6["batch"], total_steps=total, warmup_steps=int(total * 0.06),
                         base_lr=C6["lr"], eval_every=10 ** 6, log_every=100, seed=seed)
        sched = build_schedule("single-switch", "acre", pre_task, pretrain_steps=C6["pretrain_steps"],
                               pretrain_domain="cater")
        model = train(tc, sched, c5_model(vocab, seed), {"acre": train_set, "cater": videos}, vocab).model
        out[pre_task] = evaluate_acre(model, test_set, vocab).accuracy
    return out["detect_visible"], out["count_all"]


def test_c6_detection_pretraining_beats_counting_on_acre():
    with criterion(6, "ACRE: detect_visible vs count_all pretraining", budget_s=3 * 45 * 60) as info:
        wins = 0
        for seed in range(3):
            d, c = c6_seed(seed)
            wins += d > c
            info[f"seed{seed}"] = f"det={d:.3f}/count={c:.3f}"
        info["seeds_ok"] = f"{wins}/3"
        assert wins >= 2


# ---------------------------------------------------------------- 7
def test_c7_ap50_evaluator():
    with criterion(7, "AP50 vs brute-force optimal matching + hand PR example") as info:
        gts = [((0.0, 0.0, 0.2, 0.2), 0), ((0.5, 0.5, 0.7, 0.7), 0)]
        dets = [((0.0, 0.0, 0.2, 0.2), 0, 0.9), ((0.8, 0.8, 0.9, 0.9), 0, 0.4)]
        assert ap50([(dets, gts)]).ap50 == 0.5
        rng = np.random.default_rng(7)
        cases = 0
        for _ in range(20_000):
            n_gt = int(rng.integers(1, 4))
            quads = rng.permutation(4)[:n_gt]
            g = []
            for q in quads:
                y0, x0 = 0.5 * (q // 2) + rng.uniform(0, 0.2), 0.5 * (q % 2) + rng.uniform(0, 0.2)
                g.append(((y0, x0, y0 + rng.uniform(0.1, 0.28), x0 + rng.uniform(0.1, 0.28)), int(rng.integers(2))))
            d = []
            for _ in range(int(rng.integers(0, 4))):
                if rng.random() < 0.75:
                    b, c = g[int(rng.integers(n_gt))]
                    j = rng.normal(0, 0.04, 4)
                    box = (b[0] + j[0], b[1] + j[1], max(b[0] + j[0] + 0.01, b[2] + j[2]),
                           max(b[1] + j[1] + 0.01, b[3] + j[3]))
                    c = c if rng.random() < 0.8 else 1 - c
                else:
                    y, x = rng.uniform(0, 0.8, 2)
                    box, c = (y, x, y + 0.2, x + 0.2), int(rng.integers(2))
                d.append((box, c, float(rng.random())))
            assert ap50([(d, g)]).ap50 == pytest.approx(brute_optimal_ap50(d, g), abs=1e-12)
            cases += 1
        info.update(random_cases=cases, hand_example=0.5)


# ---------------------------------------------------------------- 8
C8 = dict(pretrain_steps=600, probe_steps=300, batch=32, dim=64, slots=10, n_train=500, n_test=100)


def test_c8_probe_pipeline():
    with criterion(8, "S=10 probe: report + flags + trained beats random on snitch", budget_s=15 * 60) as info:
        seed = 0
        vocab = Vocab(num_cells=16)
        train_set = generate("cater", split_seeds(seed, "train", C8["n_train"]), CaterConfig())
        test_set = generate("cater", split_seeds(seed, "test", C8["n_test"]), CaterConfig())
        d = C8["dim"]

        def fresh():
            return UnifiedModel(ModelConfig(
                encoder=EncoderConfig(dim=d, depth=2, heads=4, conv_channels=(16, 32, d), conv_strides=(2, 2, 2)),
                slots=SlotConfig(num_slots=C8["slots"]),
                decoder=DecoderConfig(depth=2, heads=4, max_len=33, vocab_size=vocab.size)), seed=seed)

        tc = TrainConfig(batch_size=C8["batch"], total_steps=C8["pretrain_steps"],
                         warmup_steps=int(C8["pretrain_steps"] * 0.06), base_lr=1e-3, eval_every=10 ** 6,
                         log_every=100, seed=seed, num_slots=C8["slots"])
        trained = train(tc, Schedule("none", [make_task("detect_all")]), fresh(), {"cater": train_set}, vocab).model

        pcfg = ProbeConfig(task="detect_all", steps=C8["probe_steps"], batch_size=C8["batch"], warmup_steps=20,
                           seed=seed)
        det_probe = train_probe(pcfg, trained, train_set, vocab)
        rep = probe_report(det_probe, trained, test_set[:30], vocab)
        flags_checked = 0
        for fr in rep.frames:
            gts = [(tuple(g["box"]), g["cls"]) for g in fr["ground_truth"]]
            for rows in fr["slots"]:
                if len(rows) <= 3:
                    got = [r["tp"] for r in rows]
                    assert got == brute_best_flags([(tuple(r["box"]), r["cls"], r["score"]) for r in rows], gts)
                    flags_checked += 1
        assert len(rep.frames) == 30 and len(rep.tp_by_object) == C8["slots"]

        scfg = ProbeConfig(task="snitch", steps=C8["probe_steps"], batch_size=C8["batch"], warmup_steps=20,
                           seed=seed)
        acc_trained = snitch_probe_accuracy(train_probe(scfg, trained, train_set, vocab), trained, test_set, vocab)
        rand = fresh()
        acc_random = snitch_probe_accuracy(train_probe(scfg, rand, train_set, vocab), rand, test_set, vocab)
        info.update(coverage=f"{rep.coverage:.3f}", slot_reads_checked=flags_checked,
                    snitch_trained=f"{acc_trained['accuracy']:.3f}", snitch_random=f"{acc_random['accuracy']:.3f}")
        assert acc_trained["accuracy"] > acc_random["accuracy"]


# ---------------------------------------------------------------- 9
def test_c9_lr_schedule():
    with criterion(9, "learning-rate schedule endpoints and midpoint") as info:
        s = OptimState(base_lr=3e-4, warmup_steps=210, total_steps=3500)
        assert lr_at(0, s) == 0.0
        assert lr_at(210, s) == 3e-4
        assert lr_at(3500, s) == 0.0
        mid = OptimState(base_lr=3e-4, warmup_steps=3500, total_steps=7000)
        assert lr_at(1750, mid) == 1.5e-4
        info.update(lr0=lr_at(0, s), lr_warm=lr_at(210, s), lr_total=lr_at(3500, s), lr_mid=lr_at(1750, mid))
