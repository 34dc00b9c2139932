"""Frozen 384-d bag-of-tokens sentence embedder.

Each vocabulary token owns a fixed Gaussian row derived from ``(seed, token)``;
a report embeds to the L2-normalized sum of its token rows.  Special tokens
map to zero rows.  Hard token sequences and soft per-position distributions go
through the same pooling code, so one-hot inputs reproduce ``embed_text``
bit for bit.  Word order is ignored, unlike a contextual encoder.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import Vocabulary
from .tensor import Tensor

EMBED_DIM = 384


@dataclass(frozen=True)
class SentenceVector:
    values: np.ndarray
    flagged: bool = False

    def __post_init__(self):
        if self.values.shape != (EMBED_DIM,):
            raise ValueError(f"sentence vectors have {EMBED_DIM} entries, got {self.values.shape}")


def _token_row(seed: int, token: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}\x00{token}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.normal(0.0, 1.0 / np.sqrt(dim), dim)


class SentenceEmbedder:
    def __init__(self, vocab: Vocabulary, seed: int = 0, dim: int = EMBED_DIM):
        self.vocab = vocab
        self.seed = seed
        self.dim = dim
        table = np.zeros((len(vocab), dim))
        for i, tok in enumerate(vocab.itos):
            if i not in vocab.special_ids:
                table[i] = _token_row(seed, tok, dim)
        table.setflags(write=False)
        self.table = table

    def pool(self, dists: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """(..., L, V) distributions -> (..., dim) unit vectors (zero when degenerate)."""
        tab = Tensor(self.table, dtype=dists.data.dtype)
        rows = T.matmul(dists, tab)
        if mask is not None:
            rows = rows * Tensor(np.asarray(mask, dtype=dists.data.dtype)[..., None])
        summed = T.tsum(rows, axis=-2)
        sq = T.tsum(summed * summed, axis=-1, keepdims=True)
        norm = T.sqrt(T.clamp_min(sq, 1e-30))
        return summed / norm

    def one_hot(self, tokens: Sequence[int], dtype=np.float64) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64)
        out = np.zeros((len(ids), len(self.vocab)), dtype=dtype)
        out[np.arange(len(ids)), ids] = 1.0
        return out

    def embed_text(self, tokens: Sequence[int]) -> SentenceVector:
        """Embed a token-id sequence; all-special or empty input gives a flagged zero vector."""
        if not any(int(t) not in self.vocab.special_ids for t in tokens):
            return SentenceVector(np.zeros(self.dim), True)
        with T.no_grad():
            v = self.pool(Tensor(self.one_hot(tokens), dtype=np.float64)).data
        return SentenceVector(np.asarray(v, dtype=np.float64))

    def embed_soft(self, dists, mask: np.ndarray | None = None, check: bool = True) -> Tensor:
        """Differentiable embedding of per-position vocabulary distributions."""
        if not isinstance(dists, Tensor):
            arr = np.asarray(dists)
            dists = Tensor(arr, dtype=arr.dtype if arr.dtype.kind == "f" else None)
        if check:
            sums = dists.data.sum(axis=-1)
            live = sums if mask is None else sums[np.asarray(mask, dtype=bool)]
            if live.size and np.max(np.abs(live - 1.0)) > 1e-5:
                raise ValueError("embed_soft: every distribution must sum to 1 (within 1e-5)")
        return self.pool(dists, mask)

    def embed_many(self, token_lists: Sequence[Sequence[int]]) -> np.ndarray:
        return np.stack([self.embed_text(toks).values for toks in token_lists])


def cosine_similarity(a: SentenceVector, b: SentenceVector) -> float:
    if a.flagged or b.flagged:
        return 0.0
    return float(np.clip(np.dot(a.values, b.values), -1.0, 1.0))


def write_embeddings_csv(path, ids: Sequence[str], vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"e{i}" for i in range(vectors.shape[1])])
        for rid, v in zip(ids, vectors):
            w.writerow([rid] + [repr(float(x)) for x in v])


def read_embeddings_csv(path) -> dict[str, np.ndarray]:
    """Precomputed embeddings: header ``id,e0..e383``, one row per report."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "id" or len(header) != EMBED_DIM + 1:
            raise ValueError(f"{path}: expected header id,e0..e{EMBED_DIM - 1}")
        for row in reader:
            vec = np.array([float(x) for x in row[1:]])
            norm = np.linalg.norm(vec)
            # leave vectors that are already unit length untouched so re-emitted artifacts match bytewise
            out[row[0]] = vec / norm if norm > 0 and abs(norm - 1.0) > 1e-12 else vec
    return out
