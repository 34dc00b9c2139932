"""Caption-style evaluation: corpus BLEU-1..4, ROUGE-L and METEOR (exact + stem stages)."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Sequence

from nltk.stem.porter import PorterStemmer

ROUGE_BETA = 1.2
METEOR_ALPHA = 0.9
METEOR_GAMMA = 0.5
METEOR_BETA = 3.0

_STEMMER = PorterStemmer(mode=PorterStemmer.ORIGINAL_ALGORITHM)


@lru_cache(maxsize=65536)
def stem(word: str) -> str:
    return _STEMMER.stem(word)


# BLEU -----------------------------------------------------------------------

def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def modified_precision_counts(candidate: Sequence[str], reference: Sequence[str], n: int) -> tuple[int, int]:
    """(clipped matches, candidate n-gram total) for one pair."""
    cand, ref = ngrams(candidate, n), ngrams(reference, n)
    clipped = sum(min(c, ref[g]) for g, c in cand.items())
    return clipped, sum(cand.values())


def bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]], max_n: int = 4,
         smoothing: float = 0.0) -> list[float]:
    """Corpus BLEU-1..max_n from pooled clipped counts; zero precision gives 0 unless smoothed."""
    if not candidates:
        raise ValueError("bleu: empty candidate list")
    if len(candidates) != len(references):
        raise ValueError("bleu: candidates and references must align")
    matches = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            m, t = modified_precision_counts(cand, ref, n)
            matches[n - 1] += m
            totals[n - 1] += t
    if c_len == 0:
        return [0.0] * max_n
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    scores = []
    log_sum = 0.0
    dead = False
    for n in range(max_n):
        if totals[n] == 0:
            dead = True
        elif matches[n] == 0:
            if smoothing > 0:
                log_sum += math.log(smoothing / totals[n])
            else:
                dead = True
        else:
            log_sum += math.log(matches[n] / totals[n])
        scores.append(0.0 if dead else bp * math.exp(log_sum / (n + 1)))
    return scores


# ROUGE-L --------------------------------------------------------------------

def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str], beta: float = ROUGE_BETA) -> float:
    if not reference:
        raise ValueError("rouge_l: empty reference")
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    r = lcs / len(reference)
    p = lcs / len(candidate)
    return (1 + beta ** 2) * r * p / (r + beta ** 2 * p)


# METEOR ---------------------------------------------------------------------

def _match_stage(cand_keys, ref_keys, cand_free, ref_free, pairs):
    """Greedy one-to-one matching on equal keys.

    Scanning the candidate left to right, each word takes the free reference
    position that continues the previous match's chunk when one exists, else
    the earliest free one.
    """
    by_key: dict[str, list[int]] = {}
    for j in sorted(ref_free):
        by_key.setdefault(ref_keys[j], []).append(j)
    matched = dict(pairs)
    for i in sorted(cand_free):
        options = by_key.get(cand_keys[i])
        if not options:
            continue
        prev = matched.get(i - 1)
        j = prev + 1 if prev is not None and prev + 1 in options else options[0]
        options.remove(j)
        matched[i] = j
        cand_free.discard(i)
        ref_free.discard(j)
    return matched


def meteor_alignment(candidate: Sequence[str], reference: Sequence[str]) -> list[tuple[int, int]]:
    cand_free, ref_free = set(range(len(candidate))), set(range(len(reference)))
    pairs = _match_stage(list(candidate), list(reference), cand_free, ref_free, {})
    pairs = _match_stage([stem(w) for w in candidate], [stem(w) for w in reference], cand_free, ref_free, pairs)
    return sorted(pairs.items())


def count_chunks(alignment: Sequence[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in sorted(alignment):
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor(candidate: Sequence[str], reference: Sequence[str], alpha: float = METEOR_ALPHA,
           gamma: float = METEOR_GAMMA, beta: float = METEOR_BETA) -> float:
    if not reference:
        raise ValueError("meteor: empty reference")
    alignment = meteor_alignment(candidate, reference)
    m = len(alignment)
    if m == 0:
        return 0.0
    p = m / len(candidate)
    r = m / len(reference)
    fmean = p * r / (alpha * p + (1 - alpha) * r)
    penalty = gamma * (count_chunks(alignment) / m) ** beta
    return fmean * (1 - penalty)


# reports --------------------------------------------------------------------

@dataclass
class SampleScores:
    sample_id: str
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    meteor: float


@dataclass
class EvalReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    meteor: float
    samples: list[SampleScores] = field(default_factory=list)

    def corpus(self) -> dict[str, float]:
        return {k: v for k, v in asdict(self).items() if k != "samples"}


def evaluate_corpus(ids: Sequence[str], candidates: Sequence[Sequence[str]],
                    references: Sequence[Sequence[str]], smoothing: float = 0.0) -> EvalReport:
    corpus_bleu = bleu(candidates, references, 4, smoothing)
    rows = []
    for sid, cand, ref in zip(ids, candidates, references):
        b = bleu([cand], [ref], 4, smoothing)
        rows.append(SampleScores(sid, *b, rouge_l(cand, ref), meteor(cand, ref)))
    n = len(rows)
    return EvalReport(*corpus_bleu,
                      rouge_l=math.fsum(r.rouge_l for r in rows) / n,
                      meteor=math.fsum(r.meteor for r in rows) / n,
                      samples=rows)


def write_eval(json_path, csv_path, report: EvalReport) -> None:
    with open(json_path, "w") as fh:
        json.dump({"corpus": report.corpus(), "samples": [asdict(s) for s in report.samples]}, fh,
                  indent=2, sort_keys=True)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        cols = ["bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "meteor"]
        w.writerow(["id"] + cols)
        w.writerow(["__corpus__"] + [repr(getattr(report, c)) for c in cols])
        for s in report.samples:
            w.writerow([s.sample_id] + [repr(getattr(s, c)) for c in cols])
