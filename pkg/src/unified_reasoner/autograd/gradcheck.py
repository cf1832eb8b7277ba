"""Central finite-difference gradient checks (run in float64)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence

import numpy as np

from .tensor import Tensor, grad, no_grad, precision


@dataclass
class GradCheckReport:
    name: str
    tolerance: float
    max_rel_err: List[float] = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max(self.max_rel_err) if self.max_rel_err else 0.0

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


SCALE_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    # Inf-norm relative error. The floor keeps gradients that are exactly zero
    # in theory (e.g. attention key biases) from turning round-off into 1.0.
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), SCALE_FLOOR)
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return out


def check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> List[float]:
    """Per-input max relative error between tape and finite-difference gradients.

    ``fn`` must rebuild the scalar loss from ``inputs`` each call; inputs are
    perturbed in place.
    """
    analytic = grad(fn(), inputs)
    return [relative_error(a, numeric_grad(fn, x, h)) for a, x in zip(analytic, inputs)]


def grad_check(name: str, build: Callable[[np.random.Generator], tuple], tolerance: float = 1e-4,
               cases: int = 10, seed: int = 0) -> GradCheckReport:
    """Run ``cases`` random instances of an op in float64.

    ``build(rng)`` returns ``(fn, inputs)`` where inputs are parameter tensors.
    """
    report = GradCheckReport(name, tolerance)
    with precision(np.float64):
        for c in range(cases):
            rng = np.random.default_rng([seed, c])
            fn, inputs = build(rng)
            report.max_rel_err.append(max(check(fn, inputs)))
    return report


def param(rng: np.random.Generator, *shape, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def _proj(rng, shape):
    # Random linear readout so every output element affects the loss.
    return Tensor(rng.normal(size=shape))


def standard_suite() -> Dict[str, Callable]:
    """Builders for every differentiable op, on random small shapes."""
    from . import tensor as T

    def _rand_dims(rng, n, lo=1, hi=5):
        return [int(v) for v in rng.integers(lo, hi, size=n)]

    def b_matmul(rng):
        m, k, n = _rand_dims(rng, 3)
        a, b = param(rng, m, k), param(rng, k, n)
        r = _proj(rng, (m, n))
        return (lambda: T.tsum(T.mul(T.matmul(a, b), r))), [a, b]

    def b_bmm(rng):
        bt, m, k, n = _rand_dims(rng, 4)
        a, b = param(rng, bt, m, k), param(rng, bt, k, n)
        r = _proj(rng, (bt, m, n))
        return (lambda: T.tsum(T.mul(T.matmul(a, b), r))), [a, b]

    def b_matmul_shared(rng):
        bt, m, k, n = _rand_dims(rng, 4)
        a, b = param(rng, bt, m, k), param(rng, k, n)
        r = _proj(rng, (bt, m, n))
        return (lambda: T.tsum(T.mul(T.matmul(a, b), r))), [a, b]

    def b_add(rng):
        lead, d = _rand_dims(rng, 2)
        a, b = param(rng, lead, 3, d), param(rng, 3, d)
        r = _proj(rng, (lead, 3, d))
        return (lambda: T.tsum(T.mul(T.add(a, b), r))), [a, b]

    def b_mul(rng):
        lead, d = _rand_dims(rng, 2)
        a, b = param(rng, lead, d), param(rng, d)
        r = _proj(rng, (lead, d))
        return (lambda: T.tsum(T.mul(T.mul(a, b), r))), [a, b]

    def b_scale(rng):
        a = param(rng, *_rand_dims(rng, 2))
        r = _proj(rng, a.shape)
        c = float(rng.normal())
        return (lambda: T.tsum(T.mul(T.scale(a, c), r))), [a]

    def b_softmax(rng):
        a = param(rng, *_rand_dims(rng, 2, 2, 6))
        r = _proj(rng, a.shape)
        return (lambda: T.tsum(T.mul(T.softmax(a), r))), [a]

    def b_layer_norm(rng):
        n, d = _rand_dims(rng, 2, 2, 6)
        a, g, b = param(rng, n, d), param(rng, d), param(rng, d)
        r = _proj(rng, (n, d))
        return (lambda: T.tsum(T.mul(T.layer_norm(a, g, b), r))), [a, g, b]

    def b_gelu(rng):
        a = param(rng, *_rand_dims(rng, 2))
        r = _proj(rng, a.shape)
        return (lambda: T.tsum(T.mul(T.gelu(a), r))), [a]

    def b_relu(rng):
        a = param(rng, *_rand_dims(rng, 2))
        a.data[np.abs(a.data) < 1e-3] += 0.01  # keep away from the kink
        r = _proj(rng, a.shape)
        return (lambda: T.tsum(T.mul(T.relu(a), r))), [a]

    def b_conv2d(rng):
        c, o = _rand_dims(rng, 2, 1, 4)
        k = int(rng.integers(1, 4))
        s = int(rng.integers(1, 3))
        pad = ["same", "valid"][int(rng.integers(0, 2))]
        h, w = int(rng.integers(k, 7)), int(rng.integers(k, 7))
        x, wt, b = param(rng, 2, c, h, w), param(rng, o, c, k, k), param(rng, o)
        probe = T.conv2d(x, wt, b, stride=s, padding=pad)
        r = _proj(rng, probe.shape)
        return (lambda: T.tsum(T.mul(T.conv2d(x, wt, b, stride=s, padding=pad), r))), [x, wt, b]

    def b_max_pool(rng):
        x = param(rng, 2, 2, 4, 6)
        r = _proj(rng, (2, 2, 2, 3))
        return (lambda: T.tsum(T.mul(T.max_pool2d(x, 2), r))), [x]

    def b_embedding(rng):
        v, d = _rand_dims(rng, 2, 2, 6)
        table = param(rng, v, d)
        ids = rng.integers(0, v, size=(3, 4))  # repeats accumulate
        r = _proj(rng, (3, 4, d))
        return (lambda: T.tsum(T.mul(T.embedding(table, ids), r))), [table]

    def b_concat(rng):
        a, b = param(rng, 2, 3), param(rng, 4, 3)
        r = _proj(rng, (6, 3))
        return (lambda: T.tsum(T.mul(T.concat([a, b], 0), r))), [a, b]

    def b_reshape_transpose(rng):
        a = param(rng, 2, 3, 4)
        r = _proj(rng, (4, 6))
        return (lambda: T.tsum(T.mul(T.transpose(T.reshape(a, (6, 4)), (1, 0)), r))), [a]

    def b_slice(rng):
        a = param(rng, 4, 5)
        r = _proj(rng, (2, 3))
        return (lambda: T.tsum(T.mul(a[1:3, ::2], r))), [a]

    def b_masked_fill(rng):
        a = param(rng, 4, 4)
        mask = np.triu(np.ones((4, 4), bool), 1)
        r = _proj(rng, (4, 4))
        return (lambda: T.tsum(T.mul(T.softmax(T.masked_fill(a, mask)), r))), [a]

    def b_softmax_xent(rng):
        n, v = _rand_dims(rng, 2, 2, 7)
        logits = param(rng, n, v)
        targets = rng.integers(0, v, size=n)
        mask = rng.random(n) < 0.7
        mask[0] = True
        return (lambda: T.cross_entropy(logits, targets, mask)), [logits]

    def b_mean(rng):
        a = param(rng, *_rand_dims(rng, 2))
        r = _proj(rng, a.shape)
        return (lambda: T.mean(T.mul(a, r))), [a]

    return {
        "matmul": b_matmul,
        "batched_matmul": b_bmm,
        "matmul_shared_rhs": b_matmul_shared,
        "add": b_add,
        "mul": b_mul,
        "scale": b_scale,
        "softmax": b_softmax,
        "layer_norm": b_layer_norm,
        "gelu": b_gelu,
        "relu": b_relu,
        "conv2d": b_conv2d,
        "max_pool2d": b_max_pool,
        "embedding": b_embedding,
        "concat": b_concat,
        "reshape_transpose": b_reshape_transpose,
        "slice": b_slice,
        "masked_fill": b_masked_fill,
        "softmax_cross_entropy": b_softmax_xent,
        "mean": b_mean,
    }


def run_all(tolerance: float = 1e-4, cases: int = 10, seed: int = 0) -> List[GradCheckReport]:
    return [grad_check(name, build, tolerance, cases, seed) for name, build in standard_suite().items()]


def spot_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], rng: np.random.Generator,
               entries: int = 6, h: float = 1e-5) -> List[float]:
    """Like :func:`check`, but on ``entries`` random coordinates of each input."""
    analytic = grad(fn(), inputs)
    errs = []
    with no_grad():
        for a, x in zip(analytic, inputs):
            flat = x.data.reshape(-1)
            picks = rng.choice(flat.size, size=min(entries, flat.size), replace=False)
            num = np.zeros(len(picks))
            for k, i in enumerate(picks):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(fn().data)
                flat[i] = orig - h
                fm = float(fn().data)
                flat[i] = orig
                num[k] = (fp - fm) / (2 * h)
            errs.append(relative_error(a.reshape(-1)[picks], num))
    return errs


def model_grad_check(seed: int = 0, tolerance: float = 1e-3, entries: int = 6) -> GradCheckReport:
    """End-to-end check through a tiny one-frame model: pixels -> slots -> decoder -> masked loss."""
    from ..codec import Vocab
    from ..model import DecoderConfig, EncoderConfig, ModelConfig, UnifiedModel, decoder_inputs
    from . import tensor as T

    report = GradCheckReport("model_end_to_end", tolerance)
    vocab = Vocab(num_cells=4)
    with precision(np.float64):
        cfg = ModelConfig(
            encoder=EncoderConfig(backbone="linear-patch", image_size=8, patch_size=4, dim=8, depth=1, heads=2),
            decoder=DecoderConfig(depth=1, heads=2, max_len=8, vocab_size=vocab.size),
            max_frames=1, max_objects=1)
        model = UnifiedModel(cfg, seed=seed)
        rng = np.random.default_rng([seed, 0xE2E])
        frames = rng.random((2, 1, 3, 8, 8))
        targets = [[vocab.cell(1), vocab.eos], [vocab.count(2), vocab.eos]]
        inputs, labels, mask = decoder_inputs([vocab.prompt("CATER"), vocab.prompt("COUNT_ALL")], targets, vocab)

        def loss():
            logits = model.decode_teacher_forced(model.encode_video(frames), inputs)
            return T.cross_entropy(logits, labels, mask)

        params = model.parameters()
        report.max_rel_err.extend(spot_check(loss, params, rng, entries))
    return report
