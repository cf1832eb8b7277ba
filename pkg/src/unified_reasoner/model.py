"""Per-frame encoder with a slot bottleneck and a prompt-conditioned decoder.

Frames are encoded independently with shared weights; each frame is
condensed into ``num_slots`` vectors. Slot vectors from all frames are
concatenated in temporal order, given learned (frame, slot) position
embeddings and used as cross-attention memory by an autoregressive decoder
whose first input token is the task prompt.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as T
from .autograd import Tensor, no_grad
from .autograd.nn import (
    Conv2d,
    CrossBlock,
    DecoderBlock,
    Embedding,
    EncoderBlock,
    LayerNorm,
    Linear,
    Module,
    causal_mask,
)
from .codec import TokenSeq, Vocab


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    backbone: str = "conv-stem"           # or "linear-patch"
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4                   # linear-patch only
    dim: int = 128
    depth: int = 4
    heads: int = 4
    conv_channels: Tuple[int, ...] = (32, 64, 128)
    conv_strides: Tuple[int, ...] = (2, 2, 1)
    conv_kernel: int = 3

    def downsample(self) -> int:
        if self.backbone == "linear-patch":
            return self.patch_size
        return int(np.prod(self.conv_strides))

    def grid(self) -> int:
        return self.image_size // self.downsample()

    def validate(self) -> None:
        if self.backbone not in ("conv-stem", "linear-patch"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.image_size % self.downsample():
            raise ConfigError(f"image size {self.image_size} not divisible by downsampling {self.downsample()}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.backbone == "conv-stem" and len(self.conv_channels) != len(self.conv_strides):
            raise ConfigError("conv_channels and conv_strides differ in length")


@dataclass
class SlotConfig:
    num_slots: int = 1
    readout_depth: int = 1
    mode: str = "cross_attention"          # or "encoder_tokens"

    def validate(self) -> None:
        if self.num_slots < 1:
            raise ConfigError("need at least one slot")
        if self.mode not in ("cross_attention", "encoder_tokens"):
            raise ConfigError(f"unknown slot mode {self.mode!r}")


@dataclass
class DecoderConfig:
    depth: int = 4
    heads: int = 4
    max_len: int = 40                      # prompt + target
    vocab_size: int = 0

    def validate(self, dim: int, longest_target: int) -> None:
        if dim % self.heads:
            raise ConfigError(f"dim {dim} not divisible by decoder heads {self.heads}")
        if self.max_len < longest_target + 1:
            raise ConfigError(f"decoder max_len {self.max_len} < prompt + longest target {longest_target + 1}")
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be set")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    slots: SlotConfig = field(default_factory=SlotConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    max_frames: int = 8
    max_objects: int = 6

    def validate(self) -> None:
        self.encoder.validate()
        self.slots.validate()
        self.decoder.validate(self.encoder.dim, 5 * self.max_objects + 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        enc = dict(d["encoder"])
        enc["conv_channels"] = tuple(enc["conv_channels"])
        enc["conv_strides"] = tuple(enc["conv_strides"])
        return cls(encoder=EncoderConfig(**enc), slots=SlotConfig(**d["slots"]),
                   decoder=DecoderConfig(**d["decoder"]), max_frames=d["max_frames"],
                   max_objects=d["max_objects"])


# ----------------------------------------------------------------------
# encoder
# ----------------------------------------------------------------------
class ConvStem(Module):
    """conv -> layer norm over channels -> ReLU, per stage; cells become tokens."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.convs = []
        self.norms = []
        c = cfg.channels
        for width, stride in zip(cfg.conv_channels, cfg.conv_strides):
            self.convs.append(Conv2d(c, width, cfg.conv_kernel, stride, rng))
            self.norms.append(LayerNorm(width))
            c = width
        self.proj = Linear(c, cfg.dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        for conv, norm in zip(self.convs, self.norms):
            x = T.transpose(conv(x), (0, 2, 3, 1))
            x = T.relu(norm(x))
            x = T.transpose(x, (0, 3, 1, 2))
        b, c, h, w = x.shape
        tokens = T.reshape(T.transpose(x, (0, 2, 3, 1)), (b, h * w, c))
        return self.proj(tokens)


class PatchEmbed(Module):
    """Linear projection of non-overlapping pixel patches."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.p = cfg.patch_size
        self.proj = Linear(cfg.channels * self.p * self.p, cfg.dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        p = self.p
        x = T.reshape(x, (b, c, h // p, p, w // p, p))
        x = T.transpose(x, (0, 2, 4, 1, 3, 5))
        x = T.reshape(x, (b, (h // p) * (w // p), c * p * p))
        return self.proj(x)


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        e, s = cfg.encoder, cfg.slots
        self.cfg = cfg
        self.stem = ConvStem(e, rng) if e.backbone == "conv-stem" else PatchEmbed(e, rng)
        n_tokens = e.grid() ** 2
        d = e.dim
        self.pos = T.Tensor(rng.normal(0.0, 0.02, size=(n_tokens, d)), requires_grad=True)
        self.slot_queries = T.Tensor(rng.normal(0.0, 0.02, size=(s.num_slots, d)), requires_grad=True)
        self.blocks = [EncoderBlock(d, e.heads, rng) for _ in range(e.depth)]
        self.ln = LayerNorm(d)
        if s.mode == "cross_attention":
            self.readout = [CrossBlock(d, e.heads, rng) for _ in range(s.readout_depth)]
            self.slot_ln = LayerNorm(d)
        else:
            self.readout = []
            self.slot_ln = None
        self.temporal = T.Tensor(rng.normal(0.0, 0.02, size=(cfg.max_frames * s.num_slots, d)),
                                 requires_grad=True)

    def patch_tokens(self, images) -> Tensor:
        """Backbone tokens before positional embeddings, (B, N, D)."""
        images = T.as_tensor(images)
        e = self.cfg.encoder
        if images.ndim != 4 or images.shape[1:] != (e.channels, e.image_size, e.image_size):
            raise ConfigError(f"image batch {images.shape} does not match encoder "
                              f"({e.channels}, {e.image_size}, {e.image_size})")
        return self.stem(images)

    def slots_from_tokens(self, tokens: Tensor, pos: Optional[Tensor] = None) -> Tensor:
        """Self-attention over tokens (+pos), then slot read-out -> (B, S, D)."""
        x = T.add(tokens, self.pos if pos is None else pos)
        b = x.shape[0]
        s = self.cfg.slots.num_slots
        if self.cfg.slots.mode == "encoder_tokens":
            q = T.add(T.Tensor(np.zeros((b, s, x.shape[2]))), self.slot_queries)
            x = T.concat([q, x], axis=1)
        for blk in self.blocks:
            x = blk(x)
        x = self.ln(x)
        if self.cfg.slots.mode == "encoder_tokens":
            return x[:, :s]
        q = T.add(T.Tensor(np.zeros((b, s, x.shape[2]))), self.slot_queries)
        for blk in self.readout:
            q = blk(q, x)
        return self.slot_ln(q)

    def encode_frame(self, images) -> Tensor:
        return self.slots_from_tokens(self.patch_tokens(images))

    def encode_video(self, frames, return_slots: bool = False):
        """(B, F, C, H, W) -> memory (B, F*S, D) with temporal positions added."""
        frames = np.asarray(frames.data if isinstance(frames, Tensor) else frames)
        if frames.ndim != 5:
            raise ConfigError(f"expected (B, F, C, H, W) frames, got {frames.shape}")
        b, f = frames.shape[:2]
        if f < 1 or f > self.cfg.max_frames:
            raise ConfigError(f"{f} frames outside [1, {self.cfg.max_frames}]")
        slots = self.encode_frame(frames.reshape((b * f,) + frames.shape[2:]))
        s, d = slots.shape[1:]
        slots = T.reshape(slots, (b, f * s, d))
        memory = T.add(slots, self.temporal[: f * s])
        return (memory, slots) if return_slots else memory


# ----------------------------------------------------------------------
# decoder
# ----------------------------------------------------------------------
class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.encoder.dim
        dc = cfg.decoder
        self.cfg = cfg
        self.tok = Embedding(dc.vocab_size, d, rng)
        self.pos = T.Tensor(rng.normal(0.0, 0.02, size=(dc.max_len, d)), requires_grad=True)
        self.blocks = [DecoderBlock(d, dc.heads, rng) for _ in range(dc.depth)]
        self.ln = LayerNorm(d)
        self.head = Linear(d, dc.vocab_size, rng)

    def __call__(self, memory: Tensor, input_ids: np.ndarray) -> Tensor:
        """Logits (B, L, V) for decoder inputs (B, L)."""
        input_ids = np.asarray(input_ids)
        b, n = input_ids.shape
        if n > self.cfg.decoder.max_len:
            raise ConfigError(f"sequence length {n} exceeds decoder max_len {self.cfg.decoder.max_len}")
        if memory.shape[0] != b:
            raise ConfigError(f"memory batch {memory.shape[0]} != token batch {b}")
        x = T.add(self.tok(input_ids), self.pos[:n])
        mask = causal_mask(n)
        for blk in self.blocks:
            x = blk(x, memory, mask)
        return self.head(self.ln(x))


def decoder_inputs(prompt_ids: Sequence[int], targets: Sequence[Sequence[int]], vocab: Vocab):
    """Teacher-forcing arrays for a batch.

    Returns ``(inputs, labels, mask)`` of shape (B, L): inputs are
    ``[prompt, BOS, target[:-1]]`` padded with PAD, labels hold the token each
    position must predict, and mask is true on target positions only.
    """
    n = max(len(t) for t in targets) + 1
    b = len(targets)
    inputs = np.full((b, n), vocab.pad, dtype=np.int64)
    labels = np.full((b, n), vocab.pad, dtype=np.int64)
    mask = np.zeros((b, n), dtype=bool)
    for i, (p, t) in enumerate(zip(prompt_ids, targets)):
        seq = [p, vocab.bos] + list(t[:-1])
        inputs[i, : len(seq)] = seq
        labels[i, 1: 1 + len(t)] = t
        mask[i, 1: 1 + len(t)] = True
    return inputs, labels, mask


def generate(decoder: Decoder, memory: Tensor, prompt_ids: Sequence[int], vocab: Vocab,
             max_len: int) -> List[TokenSeq]:
    """Greedy decoding; each TokenSeq holds emitted tokens (after BOS) and their probabilities."""
    b = len(prompt_ids)
    seqs = np.zeros((b, 2), dtype=np.int64)
    seqs[:, 0] = prompt_ids
    seqs[:, 1] = vocab.bos
    probs = np.zeros((b, 0))
    done = np.zeros(b, dtype=bool)
    limit = min(max_len, decoder.cfg.decoder.max_len - 1)
    with no_grad():
        for _ in range(limit):
            logits = decoder(memory, seqs).data[:, -1].astype(np.float64)
            e = np.exp(logits - logits.max(axis=-1, keepdims=True))
            p = e / e.sum(axis=-1, keepdims=True)
            nxt = p.argmax(axis=-1)
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            probs = np.concatenate([probs, p[np.arange(b), nxt][:, None]], axis=1)
            done |= nxt == vocab.eos
            if done.all():
                break
    out = []
    for i in range(b):
        ids = seqs[i, 2:].tolist()
        pr = probs[i].tolist()
        if vocab.eos in ids:
            k = ids.index(vocab.eos) + 1
            out.append(TokenSeq(ids[:k], [min(1.0, x) for x in pr[:k]]))
        else:
            out.append(TokenSeq(ids, [min(1.0, x) for x in pr], hit_max_len=True))
    return out


class UnifiedModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)

    def encode_video(self, frames, return_slots: bool = False):
        return self.encoder.encode_video(frames, return_slots)

    def decode_teacher_forced(self, memory: Tensor, input_ids: np.ndarray) -> Tensor:
        return self.decoder(memory, input_ids)

    def generate(self, memory: Tensor, prompt_ids: Sequence[int], vocab: Vocab, max_len: int) -> List[TokenSeq]:
        return generate(self.decoder, memory, prompt_ids, vocab, max_len)

    def predict(self, frames: np.ndarray, prompt_ids: Sequence[int], vocab: Vocab, max_len: int) -> List[TokenSeq]:
        """Encode (B, F, C, H, W) frames and decode greedily, without taping."""
        with no_grad():
            memory = self.encode_video(frames)
        return self.generate(memory, prompt_ids, vocab, max_len)


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count of :class:`UnifiedModel`.

    With D = dim, V = vocab, blocks cost: encoder 12D^2+13D, slot read-out
    12D^2+15D, decoder 16D^2+19D; linear layers in*out+out, norms 2*width.
    """
    e, s, dc = cfg.encoder, cfg.slots, cfg.decoder
    D, V = e.dim, dc.vocab_size
    if e.backbone == "conv-stem":
        stem, c = 0, e.channels
        for w in e.conv_channels:
            stem += c * w * e.conv_kernel ** 2 + w + 2 * w
            c = w
        stem += c * D + D
    else:
        stem = e.channels * e.patch_size ** 2 * D + D
    n_tokens = e.grid() ** 2
    enc = stem + n_tokens * D + s.num_slots * D + e.depth * (12 * D * D + 13 * D) + 2 * D
    if s.mode == "cross_attention":
        enc += s.readout_depth * (12 * D * D + 15 * D) + 2 * D
    enc += cfg.max_frames * s.num_slots * D
    dec = V * D + dc.max_len * D + dc.depth * (16 * D * D + 19 * D) + 2 * D + D * V + V
    return enc + dec
