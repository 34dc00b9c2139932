"""Similarity score between a reference report and a predicted one, and its loss.

S = relu(cos(embed(reference), embed(prediction))).  Training feeds soft
per-position distributions through ``embed_soft`` so S is differentiable;
evaluation uses the hard decoded tokens.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import SPECIALS
from .embedder import SentenceEmbedder
from .tensor import Tensor

SC_EPS = 1e-8


@dataclass(frozen=True)
class SimilarityRecord:
    sample_id: str
    score: float
    length_ratio: float


def similarity_score(embedder: SentenceEmbedder, y_tokens: Sequence[int], p_soft,
                     mask: np.ndarray | None = None) -> Tensor:
    """Differentiable S for one sample; ``p_soft`` is (L, V)."""
    ref = embedder.embed_text(y_tokens)
    dists = T.as_tensor(p_soft)
    if dists.shape[0] == 0 or ref.flagged:
        return Tensor(0.0, dtype=dists.data.dtype)
    pred = embedder.embed_soft(dists, mask)
    cos = T.tsum(pred * Tensor(ref.values, dtype=dists.data.dtype))
    return T.relu(cos)


def batch_similarity(embedder: SentenceEmbedder, y_tokens: Sequence[Sequence[int]], p_soft,
                     mask: np.ndarray) -> Tensor:
    """S for a batch of teacher-forced distributions (N, L, V) -> (N,)."""
    dists = T.as_tensor(p_soft)
    dt = dists.data.dtype
    refs = np.stack([embedder.embed_text(toks).values for toks in y_tokens]).astype(dt)
    pred = embedder.pool(dists, mask)
    return T.relu(T.tsum(pred * Tensor(refs, dtype=dt), axis=-1))


def hard_similarity(embedder: SentenceEmbedder, y_tokens: Sequence[int], pred_tokens: Sequence[int]) -> float:
    ref, pred = embedder.embed_text(y_tokens), embedder.embed_text(pred_tokens)
    if ref.flagged or pred.flagged:
        return 0.0
    return max(0.0, float(np.dot(ref.values, pred.values)))


def sc_loss(scores) -> Tensor:
    """-sum_i log(max(S_i, 1e-8))."""
    s = T.as_tensor(scores)
    return -T.tsum(T.log(T.clamp_min(s, SC_EPS)))


def length_ratio(pred_words: Sequence[str], ref_words: Sequence[str]) -> float:
    n_ref = sum(1 for w in ref_words if w not in SPECIALS)
    n_pred = sum(1 for w in pred_words if w not in SPECIALS)
    return n_pred / n_ref if n_ref else 0.0


def write_similarity_csv(path, records: Sequence[SimilarityRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "S", "length_ratio"])
        for r in records:
            w.writerow([r.sample_id, repr(r.score), repr(r.length_ratio)])


def read_similarity_csv(path) -> list[SimilarityRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [SimilarityRecord(row["id"], float(row["S"]), float(row["length_ratio"])) for row in reader]
