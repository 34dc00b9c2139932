"""Transformer report generator over visual features.

The encoder reads a memory sequence built from the visual features: either the
2 x grid x grid patch vectors of both views ("spatial") or the single pooled
vector ("global").  A causally masked decoder predicts the report tokens.
Every sublayer is post-norm: ``x = LN(x + f(x))``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .corpus import BOS, EOS, PAD
from .tensor import ShapeError, Tensor
from .vision import VisualFeatures

LOG_FLOOR = 1e-12
_NEG = -1e9
_NEVER_EMIT = (PAD, BOS)


@dataclass(frozen=True)
class TransformerConfig:
    vocab_size: int = 100
    d_model: int = 64
    num_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int | None = None
    dropout: float = 0.1
    max_len: int = 60
    memory_mode: str = "spatial"
    feature_channels: int = 32
    grid: int = 7
    loss_form: str = "bernoulli"

    def validate(self) -> "TransformerConfig":
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by num_heads {self.num_heads}")
        if self.memory_mode not in ("spatial", "global"):
            raise ValueError(f"unknown memory mode {self.memory_mode!r}")
        if self.loss_form not in ("bernoulli", "ce"):
            raise ValueError(f"unknown loss form {self.loss_form!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.max_len < 2 or self.vocab_size < 5:
            raise ValueError("max_len must be >= 2 and the vocabulary must exceed the special tokens")
        return self

    @property
    def ffn(self) -> int:
        return self.ffn_dim or 4 * self.d_model

    @property
    def memory_len(self) -> int:
        return 2 * self.grid * self.grid if self.memory_mode == "spatial" else 1


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.q = nn.Linear(d, d, rng)
        self.k = nn.Linear(d, d, rng)
        self.v = nn.Linear(d, d, rng)
        self.o = nn.Linear(d, d, rng)

    def _split(self, x: Tensor) -> Tensor:
        n, l, d = x.shape
        return T.transpose(T.reshape(x, (n, l, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, query, source, mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
        """``mask`` is boolean (Lq, Ls) or (N, 1, Lq, Ls); True marks blocked pairs."""
        n, lq, d = query.shape
        q, k, v = self._split(self.q(query)), self._split(self.k(source)), self._split(self.v(source))
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d // self.heads))
        if mask is not None:
            scores = scores + Tensor(np.where(mask, _NEG, 0.0), dtype=scores.data.dtype)
        attn = T.softmax(scores, axis=-1)
        out = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (n, lq, d))
        return self.o(out), attn.data


class FeedForward(nn.Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.fc1 = nn.Linear(d, hidden, rng)
        self.fc2 = nn.Linear(hidden, d, rng)

    def __call__(self, x):
        return self.fc2(T.relu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        self.attn = MultiHeadAttention(cfg.d_model, cfg.num_heads, rng)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn, rng)
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.ln2 = nn.LayerNorm(cfg.d_model)

    def __call__(self, x, drop):
        h, _ = self.attn(x, x)
        x = self.ln1(x + drop(h))
        return self.ln2(x + drop(self.ffn(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.num_heads, rng)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.num_heads, rng)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn, rng)
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ln3 = nn.LayerNorm(cfg.d_model)

    def __call__(self, x, memory, causal, drop):
        h, _ = self.self_attn(x, x, causal)
        x = self.ln1(x + drop(h))
        h, cross = self.cross_attn(x, memory)
        x = self.ln2(x + drop(h))
        return self.ln3(x + drop(self.ffn(x))), cross


@dataclass
class DecoderState:
    """Token ids so far (starting with BOS) and, per decoded step, the
    cross-attention of the newest position: array (layers, heads, source)."""

    tokens: list[int] = field(default_factory=lambda: [BOS])
    steps: list[np.ndarray] = field(default_factory=list)

    @property
    def cross_attention(self) -> np.ndarray:
        """(layers, heads, generated steps, source)."""
        if not self.steps:
            return np.zeros((0, 0, 0, 0))
        return np.stack(self.steps, axis=2)

    @property
    def generated(self) -> list[int]:
        out = [t for t in self.tokens[1:]]
        return out[:-1] if out and out[-1] == EOS else out


def causal_mask(length: int) -> np.ndarray:
    return np.triu(np.ones((length, length), dtype=bool), k=1)


class ReportGenerator(nn.Module):
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        self.cfg = cfg.validate()
        d = cfg.d_model
        if cfg.memory_mode == "spatial":
            self.feature_proj = nn.Linear(cfg.feature_channels, d, rng)
            self.view_emb = nn.parameter(rng.normal(0.0, 0.02, (2, d)))
            self.patch_pos = nn.parameter(rng.normal(0.0, 0.02, (cfg.grid * cfg.grid, d)))
        else:
            self.feature_proj = nn.Linear(2 * cfg.feature_channels, d, rng)
        self.encoder = [EncoderLayer(cfg, rng) for _ in range(cfg.enc_layers)]
        self.decoder = [DecoderLayer(cfg, rng) for _ in range(cfg.dec_layers)]
        self.tok_emb = nn.Embedding(cfg.vocab_size, d, rng)
        self.pos_emb = nn.Embedding(cfg.max_len, d, rng)
        self.out = nn.Linear(d, cfg.vocab_size, rng)
        self.rng = np.random.default_rng(rng.integers(2**63))

    def _dropout(self, x):
        return T.dropout(x, self.cfg.dropout, self.rng, self.training)

    # encoder -------------------------------------------------------------

    def memory_inputs(self, features: VisualFeatures) -> Tensor:
        cfg = self.cfg
        if cfg.memory_mode == "global":
            v = features.v_avg
            if v.ndim != 2 or v.shape[1] != 2 * cfg.feature_channels:
                raise ShapeError(
                    f"global memory expects (N, {2 * cfg.feature_channels}) pooled features, got {v.shape}")
            return T.reshape(self.feature_proj(v), (v.shape[0], 1, cfg.d_model))
        views = []
        for i, maps in enumerate((features.v_a, features.v_l)):
            n, c, g, g2 = maps.shape
            if c != cfg.feature_channels or g != cfg.grid or g2 != cfg.grid:
                raise ShapeError(f"spatial memory expects (N, {cfg.feature_channels}, {cfg.grid}, {cfg.grid}) maps, "
                                 f"got {maps.shape}")
            patches = T.transpose(T.reshape(maps, (n, c, g * g)), (0, 2, 1))
            pos = self.patch_pos + T.getitem(self.view_emb, i)
            views.append(self.feature_proj(patches) + pos)
        return T.concat(views, axis=1)

    def encode(self, memory_in: Tensor) -> Tensor:
        x = self._dropout(memory_in)
        for layer in self.encoder:
            x = layer(x, self._dropout)
        return x

    def encode_visual(self, features: VisualFeatures) -> Tensor:
        return self.encode(self.memory_inputs(features))

    # decoder -------------------------------------------------------------

    def decode(self, tokens: np.ndarray, memory: Tensor) -> tuple[Tensor, list[np.ndarray]]:
        """Logits (N, L, V) for every prefix position plus per-layer cross-attention."""
        tokens = np.asarray(tokens, dtype=np.int64)
        n, length = tokens.shape
        if length > self.cfg.max_len:
            raise ShapeError(f"prefix length {length} exceeds max_len {self.cfg.max_len}")
        x = self.tok_emb(tokens) + self.pos_emb(np.arange(length))
        x = self._dropout(x)
        mask = causal_mask(length)
        cross = []
        for layer in self.decoder:
            x, attn = layer(x, memory, mask, self._dropout)
            cross.append(attn)
        return self.out(x), cross

    def forward_teacher(self, features: VisualFeatures, tokens: np.ndarray) -> Tensor:
        """Output distributions (N, L-1, V) for inputs ``tokens[:, :-1]``."""
        memory = self.encode_visual(features)
        logits, _ = self.decode(np.asarray(tokens)[:, :-1], memory)
        return T.softmax(logits, axis=-1)

    def decode_step(self, state: DecoderState, memory: Tensor) -> np.ndarray:
        if not state.tokens:
            raise ValueError("decoder state must start with BOS")
        with T.no_grad():
            logits, cross = self.decode(np.asarray([state.tokens]), memory)
            last = logits.data[0, -1].copy()
            last[list(_NEVER_EMIT)] = -np.inf
            probs = T.softmax(Tensor(last), axis=-1).data
        state.steps.append(np.stack([c[0, :, -1, :] for c in cross]))
        return probs

    # generation ----------------------------------------------------------

    def generate(self, memory: Tensor, mode: str = "greedy", width: int = 3,
                 max_len: int | None = None) -> tuple[list[int], DecoderState]:
        """Decode one sample; ``memory`` has shape (1, S, d)."""
        was_training = self.training
        self.eval()
        try:
            if mode == "greedy":
                state = self._greedy(memory, max_len or self.cfg.max_len)
            elif mode == "beam":
                state = self._beam(memory, width, max_len or self.cfg.max_len)
            else:
                raise ValueError(f"unknown decode mode {mode!r}")
        finally:
            self.train(was_training)
        return state.generated, state

    def _greedy(self, memory, max_len):
        state = DecoderState()
        while len(state.tokens) < max_len:
            probs = self.decode_step(state, memory)
            nxt = int(np.argmax(probs))
            state.tokens.append(nxt)
            if nxt == EOS:
                break
        return state

    def _beam(self, memory, width, max_len):
        if width < 1:
            raise ValueError("beam width must be at least 1")
        beams = [(0.0, DecoderState())]
        finished = []
        while beams:
            candidates = []
            for score, st in beams:
                probs = self.decode_step(st, memory)
                logp = np.log(np.maximum(probs.astype(np.float64), LOG_FLOOR))
                for tok in np.argsort(-logp, kind="stable")[:width]:
                    candidates.append((score + logp[tok], st, int(tok)))
            candidates.sort(key=lambda c: -c[0])
            beams = []
            for score, st, tok in candidates[:width]:
                new = DecoderState(st.tokens + [tok], list(st.steps))
                if tok == EOS or len(new.tokens) >= max_len:
                    finished.append((score / (len(new.tokens) - 1), new))
                else:
                    beams.append((score, new))
            if len(finished) >= width:
                break
        best = max(finished, key=lambda f: f[0])
        return best[1]

    def greedy_batch(self, memory: Tensor, max_len: int | None = None) -> list[list[int]]:
        """Greedy decoding for a batch; rows stop independently at EOS."""
        max_len = max_len or self.cfg.max_len
        n = memory.shape[0]
        was_training = self.training
        self.eval()
        tokens = np.full((n, 1), BOS, dtype=np.int64)
        done = np.zeros(n, dtype=bool)
        try:
            with T.no_grad():
                while tokens.shape[1] < max_len and not done.all():
                    logits, _ = self.decode(tokens, memory)
                    last = logits.data[:, -1, :].copy()
                    last[:, list(_NEVER_EMIT)] = -np.inf
                    nxt = np.argmax(last, axis=-1)
                    nxt = np.where(done, PAD, nxt)
                    tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
                    done |= nxt == EOS
        finally:
            self.train(was_training)
        out = []
        for row in tokens[:, 1:]:
            seq = []
            for t in row:
                if t in (EOS, PAD):
                    break
                seq.append(int(t))
            out.append(seq)
        return out


def tf_loss(probs, targets: np.ndarray, mask: np.ndarray | None = None, form: str = "bernoulli") -> Tensor:
    """Teacher-forced loss over unmasked positions, averaged per position.

    ``bernoulli``: -sum_v [y_v log p_v + (1 - y_v) log(1 - p_v)] per position.
    ``ce``: -log p_target per position.  Logs are floored at 1e-12.
    """
    probs = T.as_tensor(probs)
    targets = np.asarray(targets, dtype=np.int64)
    if probs.shape[:-1] != targets.shape:
        raise ShapeError(f"tf_loss: distributions {probs.shape} vs targets {targets.shape}")
    if mask is None:
        mask = targets != PAD
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    dt = probs.data.dtype
    if count == 0:
        return Tensor(0.0, dtype=dt)
    onehot = np.zeros(probs.shape, dtype=dt)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    weight = Tensor(mask[..., None].astype(dt), dtype=dt)
    pos_term = T.log(T.clamp_min(probs, LOG_FLOOR)) * Tensor(onehot, dtype=dt)
    if form == "bernoulli":
        neg = T.log(T.clamp_min(1.0 - probs, LOG_FLOOR)) * Tensor(1.0 - onehot, dtype=dt)
        per = pos_term + neg
    elif form == "ce":
        per = pos_term
    else:
        raise ValueError(f"unknown loss form {form!r}")
    return -T.tsum(per * weight) * (1.0 / count)


def attention_maps(state: DecoderState, cfg: TransformerConfig) -> np.ndarray:
    """Head-averaged final-layer cross-attention per generated token: (steps, 2, grid, grid)."""
    if cfg.memory_mode != "spatial":
        raise ValueError("attention maps need the spatial memory mode; global memory has a single slot")
    if not state.steps:
        return np.zeros((0, 2, cfg.grid, cfg.grid))
    att = np.stack([s[-1].mean(axis=0) for s in state.steps])
    return att.reshape(len(state.steps), 2, cfg.grid, cfg.grid)


def write_attention_csv(path, tokens: Sequence[str], maps: np.ndarray) -> None:
    maps = np.asarray(maps)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        flat = maps.reshape(len(maps), -1)
        w.writerow(["token"] + [f"v{k // (flat.shape[1] // 2)}_{k % (flat.shape[1] // 2)}"
                                for k in range(flat.shape[1])])
        for tok, row in zip(tokens, flat):
            w.writerow([tok] + [repr(float(x)) for x in row])


def read_attention_csv(path, grid: int) -> tuple[list[str], np.ndarray]:
    tokens, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            tokens.append(row[0])
            rows.append([float(x) for x in row[1:]])
    return tokens, np.array(rows).reshape(len(rows), 2, grid, grid)
