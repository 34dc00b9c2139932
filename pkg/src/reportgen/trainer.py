"""Training orchestration: topic distillation, the combined objective, the
optimization loop, checkpoints and evaluation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .comparer import (SimilarityRecord, batch_similarity, hard_similarity, length_ratio, sc_loss,
                       write_similarity_csv)
from .corpus import PAD, DataError, ReportRecord, Vocabulary, build_vocabulary
from .embedder import SentenceEmbedder, write_embeddings_csv
from .generator import ReportGenerator, TransformerConfig, attention_maps, tf_loss, write_attention_csv
from .hdbscan import (HdbscanConfig, TopicAssignment, hdbscan, topic_similarity_matrix, write_matrix_csv,
                      write_topics_csv)
from .metrics import EvalReport, evaluate_corpus, write_eval
from .optim import Adam, AdamState, EarlyStopping
from .tensor import Tensor
from .umap import UmapConfig, umap_embed, write_umap_csv
from .vision import VISION_PRESETS, VisionConfig, VisualExtractor, kmve_loss

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SGF1"
CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    lr_kmve: float = 5e-4
    lr_rg: float = 1e-4
    lr_decay: float = 0.8
    batch_size: int = 16
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0
    w_kmve: float = 1.0
    w_tf: float = 1.0
    w_sc: float = 1.0
    min_frequency: int = 3
    vision: VisionConfig = VisionConfig()
    transformer: TransformerConfig = TransformerConfig()
    umap: UmapConfig = UmapConfig()
    hdbscan: HdbscanConfig = HdbscanConfig()

    def validate(self) -> "TrainConfig":
        if self.lr_kmve <= 0 or self.lr_rg <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        self.vision.validate()
        self.transformer.validate()
        self.umap.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {"vision": VisionConfig, "transformer": TransformerConfig, "umap": UmapConfig,
                  "hdbscan": HdbscanConfig}
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                sub = dict(d[key])
                if key == "vision" and "image_size" in sub:
                    sub["image_size"] = tuple(sub["image_size"])
                d[key] = typ(**sub)
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


PRESETS = {
    "desk": TrainConfig(),
    "paper": TrainConfig(
        vision=VisionConfig(image_size=(3, 224, 224), channels=2048),
        transformer=TransformerConfig(d_model=512, num_heads=8, enc_layers=3, dec_layers=3,
                                      feature_channels=2048),
    ),
}
PRESETS["paper244"] = dataclasses.replace(PRESETS["paper"], vision=VISION_PRESETS["paper244"])


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    ids: list[str]
    images: np.ndarray           # (N, 2, C, H, W)
    tokens: np.ndarray           # (N, L) padded with PAD
    topics: np.ndarray           # (N,), -1 for none
    references: list[tuple[int, ...]]


@dataclass
class Dataset:
    ids: list[str]
    images: np.ndarray
    tokens: list[tuple[int, ...]]

    def __len__(self) -> int:
        return len(self.ids)

    def batch(self, index: Sequence[int], topics: dict[str, int] | None = None) -> Batch:
        index = list(index)
        refs = [self.tokens[i] for i in index]
        width = max(len(t) for t in refs)
        toks = np.full((len(index), width), PAD, dtype=np.int64)
        for r, t in enumerate(refs):
            toks[r, : len(t)] = t
        ids = [self.ids[i] for i in index]
        labels = np.array([(topics or {}).get(i, -1) for i in ids], dtype=np.int64)
        return Batch(ids, self.images[index], toks, labels, refs)


def build_dataset(records: Sequence[ReportRecord], images, vocab: Vocabulary, max_len: int) -> Dataset:
    ids, arrs, toks = [], [], []
    for r in records:
        ids.append(r.id)
        arrs.append(np.stack([images(r.images[0]), images(r.images[1])]).astype(np.float32))
        toks.append(vocab.encode(r.words, max_len))
    if not ids:
        raise DataError("empty split")
    return Dataset(ids, np.stack(arrs), toks)


# ---------------------------------------------------------------------------
# distillation
# ---------------------------------------------------------------------------

@dataclass
class Distillation:
    ids: list[str]
    assignment: TopicAssignment
    embeddings: np.ndarray
    coords: np.ndarray
    similarity: np.ndarray | None

    @property
    def topics(self) -> dict[str, int]:
        return {i: int(lab) for i, lab in zip(self.ids, self.assignment.labels)}


def distill(records: Sequence[ReportRecord], vocab: Vocabulary, cfg: TrainConfig,
            out_dir: Path | None = None) -> Distillation:
    """Embed, reduce and cluster the given (training) reports into topics."""
    embedder = SentenceEmbedder(vocab, seed=cfg.seed)
    ids = [r.id for r in records]
    emb = embedder.embed_many([vocab.encode(r.words, 10**9) for r in records])
    coords, _ = umap_embed(emb, dataclasses.replace(cfg.umap, seed=cfg.umap.seed + cfg.seed))
    assignment, _ = hdbscan(coords, cfg.hdbscan)
    sim = topic_similarity_matrix(assignment.labels, emb) if assignment.k else None
    result = Distillation(ids, assignment, emb, coords, sim)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_umap_csv(out_dir / "umap.csv", ids, coords)
        write_topics_csv(out_dir / "topics.csv", ids, assignment)
        write_embeddings_csv(out_dir / "embeddings.csv", ids, emb)
        if sim is not None:
            write_matrix_csv(out_dir / "topic_similarity.csv", sim)
    return result


# ---------------------------------------------------------------------------
# model and objective
# ---------------------------------------------------------------------------

class SGFModel(nn.Module):
    def __init__(self, cfg: TrainConfig, vocab_size: int, num_topics: int):
        rng = np.random.default_rng(cfg.seed)
        vcfg = dataclasses.replace(cfg.vision, num_topics=max(1, num_topics))
        tcfg = dataclasses.replace(cfg.transformer, vocab_size=vocab_size,
                                   feature_channels=vcfg.channels, grid=vcfg.grid)
        self.vision = VisualExtractor(vcfg, rng)
        self.generator = ReportGenerator(tcfg, rng)

    def groups(self) -> dict[str, list[Tensor]]:
        return {"kmve": self.vision.parameters(), "rg": self.generator.parameters()}


@dataclass
class LossParts:
    total: Tensor
    kmve: float
    tf: float
    sc: float
    scores: np.ndarray

    @property
    def value(self) -> float:
        return float(self.total.data)


def combine_components(l_kmve: Tensor, l_tf: Tensor, l_sc: Tensor, cfg: TrainConfig) -> Tensor:
    return l_kmve * cfg.w_kmve + l_tf * cfg.w_tf + l_sc * cfg.w_sc


def combined_loss(model: SGFModel, embedder: SentenceEmbedder, batch: Batch, cfg: TrainConfig,
                  use_topics: bool = True) -> LossParts:
    """w_kmve * L_KMVE + w_tf * L_TF + w_sc * L_SC for one batch.

    Batch reductions: KMVE is the mean over non-noise samples, TF the mean over
    unpadded target positions, SC the mean of -log(max(S, eps)) over samples.
    """
    feats = model.vision.encode_pair(batch.images[:, 0], batch.images[:, 1])
    topics = batch.topics if use_topics else np.full(len(batch.ids), -1)
    l_kmve = kmve_loss(feats.logits, topics)
    probs = model.generator.forward_teacher(feats, batch.tokens)
    targets = batch.tokens[:, 1:]
    mask = targets != PAD
    l_tf = tf_loss(probs, targets, mask, model.generator.cfg.loss_form)
    scores = batch_similarity(embedder, batch.references, probs, mask)
    l_sc = sc_loss(scores) * (1.0 / len(batch.ids))
    total = combine_components(l_kmve, l_tf, l_sc, cfg)
    return LossParts(total, float(l_kmve.data), float(l_tf.data), float(l_sc.data), scores.data.copy())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    model: SGFModel
    optimizer: Adam
    stopper: EarlyStopping
    data_rng: np.random.Generator
    epoch: int = 0
    history: list[dict] = field(default_factory=list)


def new_state(cfg: TrainConfig, vocab_size: int, num_topics: int) -> TrainState:
    model = SGFModel(cfg, vocab_size, num_topics)
    opt = Adam(model.groups(), {"kmve": cfg.lr_kmve, "rg": cfg.lr_rg})
    return TrainState(model, opt, EarlyStopping(cfg.patience), np.random.default_rng([cfg.seed, 1]))


def train_step(state: TrainState, embedder: SentenceEmbedder, batch: Batch, cfg: TrainConfig) -> LossParts:
    state.model.train()
    state.optimizer.zero_grad()
    parts = combined_loss(state.model, embedder, batch, cfg)
    if not math.isfinite(parts.value):
        raise NumericError(f"non-finite loss {parts.value} (kmve={parts.kmve}, tf={parts.tf}, sc={parts.sc}) "
                           f"in batch {batch.ids[:4]}")
    parts.total.backward()
    for name, p in state.model.named_parameters():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in {name}")
    state.optimizer.step()
    return parts


def validation_loss(model: SGFModel, embedder: SentenceEmbedder, data: Dataset, cfg: TrainConfig) -> float:
    """Mean L_SG over the split without the topic term (held-out reports carry no topics)."""
    model.eval()
    total, count = 0.0, 0
    with T.no_grad():
        for start in range(0, len(data), cfg.batch_size):
            idx = range(start, min(start + cfg.batch_size, len(data)))
            parts = combined_loss(model, embedder, data.batch(idx), cfg, use_topics=False)
            total += parts.value * len(idx)
            count += len(idx)
    model.train()
    return total / count


def run_epoch(state: TrainState, embedder: SentenceEmbedder, train: Dataset, topics: dict[str, int],
              cfg: TrainConfig) -> dict:
    state.optimizer.set_epoch(state.epoch, cfg.lr_decay)
    order = state.data_rng.permutation(len(train))
    sums = np.zeros(4)
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start: start + cfg.batch_size]
        parts = train_step(state, embedder, train.batch(idx, topics), cfg)
        sums += np.array([parts.value, parts.kmve, parts.tf, parts.sc]) * len(idx)
    sums /= len(train)
    return {"epoch": state.epoch, "loss": sums[0], "kmve": sums[1], "tf": sums[2], "sc": sums[3],
            "lr_kmve": state.optimizer.lr("kmve"), "lr_rg": state.optimizer.lr("rg")}


def train(cfg: TrainConfig, vocab: Vocabulary, train_data: Dataset, val_data: Dataset | None,
          topics: dict[str, int], num_topics: int, out_dir: Path | None = None,
          state: TrainState | None = None) -> TrainState:
    """Epoch loop with per-epoch decay, early stopping on validation loss and best/last checkpoints."""
    embedder = SentenceEmbedder(vocab, seed=cfg.seed)
    if state is None:
        state = new_state(cfg, len(vocab), num_topics)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    while state.epoch < cfg.max_epochs:
        row = run_epoch(state, embedder, train_data, topics, cfg)
        val = validation_loss(state.model, embedder, val_data, cfg) if val_data is not None else row["loss"]
        row["val_loss"] = val
        state.history.append(row)
        logger.info("epoch %d loss %.4f val %.4f", state.epoch, row["loss"], val)
        stop = state.stopper.update(val, state.epoch)
        state.epoch += 1
        if out_dir is not None:
            if state.stopper.improved:
                save_checkpoint(Path(out_dir) / "best.ckpt", state, cfg, vocab, num_topics)
            save_checkpoint(Path(out_dir) / "last.ckpt", state, cfg, vocab, num_topics)
        if stop:
            break
    return state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _set_rng_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state


def save_checkpoint(path, state: TrainState, cfg: TrainConfig, vocab: Vocabulary, num_topics: int) -> None:
    """Binary checkpoint: magic, u32 version, u64 header length, JSON header, f32 payload."""
    tensors: list[tuple[str, np.ndarray]] = [(f"param.{n}", p.data) for n, p in state.model.named_parameters()]
    adam = {}
    for group, st in state.optimizer.states.items():
        adam[group] = {"step": st.step, "learning_rate": st.learning_rate, "beta1": st.beta1,
                       "beta2": st.beta2, "epsilon": st.epsilon}
        for i, (m, v) in enumerate(zip(st.first_moment, st.second_moment)):
            tensors.append((f"adam.{group}.m.{i}", m))
            tensors.append((f"adam.{group}.v.{i}", v))
    index, offset, chunks = [], 0, []
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(raw)
        chunks.append(raw)
    best = state.stopper.best
    header = {
        "config": cfg.to_dict(),
        "vocab": vocab.itos,
        "min_frequency": vocab.min_frequency,
        "num_topics": num_topics,
        "epoch": state.epoch,
        "best_val": best if math.isfinite(best) else None,
        "early_stopping": {"best_epoch": state.stopper.best_epoch, "bad_epochs": state.stopper.bad_epochs},
        "history": state.history,
        "adam": adam,
        "rng": {"data": _rng_state(state.data_rng), "dropout": _rng_state(state.model.generator.rng)},
        "tensors": index,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


@dataclass
class LoadedCheckpoint:
    cfg: TrainConfig
    vocab: Vocabulary
    num_topics: int
    state: TrainState


def load_checkpoint(path) -> LoadedCheckpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16: 16 + hlen])
    base = 16 + hlen
    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=count,
                                              offset=base + entry["offset"]).reshape(entry["shape"]).astype(np.float32)
    cfg = TrainConfig.from_dict(header["config"])
    vocab = Vocabulary(header["vocab"], header["min_frequency"])
    state = new_state(cfg, len(vocab), header["num_topics"])
    state.model.load_state_dict({k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
    for group, meta in header["adam"].items():
        st: AdamState = state.optimizer.states[group]
        st.step = meta["step"]
        st.learning_rate = meta["learning_rate"]
        n = len(state.optimizer.groups[group])
        if f"adam.{group}.m.0" in arrays:
            st.first_moment = [arrays[f"adam.{group}.m.{i}"].copy() for i in range(n)]
            st.second_moment = [arrays[f"adam.{group}.v.{i}"].copy() for i in range(n)]
    state.epoch = header["epoch"]
    state.stopper.best = header["best_val"] if header["best_val"] is not None else float("inf")
    state.stopper.best_epoch = header["early_stopping"]["best_epoch"]
    state.stopper.bad_epochs = header["early_stopping"]["bad_epochs"]
    state.history = header["history"]
    _set_rng_state(state.data_rng, header["rng"]["data"])
    _set_rng_state(state.model.generator.rng, header["rng"]["dropout"])
    return LoadedCheckpoint(cfg, vocab, header["num_topics"], state)


# ---------------------------------------------------------------------------
# generation and evaluation
# ---------------------------------------------------------------------------

@dataclass
class Evaluation:
    report: EvalReport
    similarity: list[SimilarityRecord]
    predictions: dict[str, list[str]]

    @property
    def mean_similarity(self) -> float:
        return float(np.mean([r.score for r in self.similarity])) if self.similarity else 0.0


def generate_reports(model: SGFModel, data: Dataset, batch_size: int = 16) -> list[list[int]]:
    model.eval()
    out = []
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            idx = list(range(start, min(start + batch_size, len(data))))
            b = data.batch(idx)
            feats = model.vision.encode_pair(b.images[:, 0], b.images[:, 1])
            memory = model.generator.encode_visual(feats)
            out.extend(model.generator.greedy_batch(memory))
    return out


def evaluate(model: SGFModel, vocab: Vocabulary, data: Dataset, seed: int = 0, out_dir: Path | None = None,
             attention_for: int = 0, predictions: list[list[int]] | None = None) -> Evaluation:
    """Greedy decoding, caption metrics, similarity records and optional attention exports."""
    embedder = SentenceEmbedder(vocab, seed=seed)
    preds = predictions if predictions is not None else generate_reports(model, data)
    cands = [vocab.decode(p) for p in preds]
    refs = [vocab.decode(t) for t in data.tokens]
    report = evaluate_corpus(data.ids, cands, refs)
    sims = [SimilarityRecord(i, hard_similarity(embedder, t, p), length_ratio(c, r))
            for i, t, p, c, r in zip(data.ids, data.tokens, preds, cands, refs)]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_eval(out_dir / "eval.json", out_dir / "eval.csv", report)
        write_similarity_csv(out_dir / "similarity.csv", sims)
        if attention_for:
            export_attention(model, vocab, data, out_dir, attention_for)
    return Evaluation(report, sims, dict(zip(data.ids, cands)))


def export_attention(model: SGFModel, vocab: Vocabulary, data: Dataset, out_dir: Path, count: int) -> list[Path]:
    cfg = model.generator.cfg
    if cfg.memory_mode != "spatial":
        raise ValueError("attention export needs the spatial memory mode")
    paths = []
    model.eval()
    with T.no_grad():
        for i in range(min(count, len(data))):
            b = data.batch([i])
            feats = model.vision.encode_pair(b.images[:, 0], b.images[:, 1])
            memory = model.generator.encode_visual(feats)
            _, dstate = model.generator.generate(memory)
            maps = attention_maps(dstate, cfg)
            words = [vocab.itos[t] for t in dstate.tokens[1:]]
            path = Path(out_dir) / f"attn_{data.ids[i]}.csv"
            write_attention_csv(path, words, maps)
            paths.append(path)
    return paths


def vocabulary_for(train_records: Sequence[ReportRecord], cfg: TrainConfig) -> Vocabulary:
    return build_vocabulary(train_records, cfg.min_frequency)
