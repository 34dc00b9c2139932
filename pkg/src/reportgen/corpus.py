"""Reports, vocabulary, the 7:1:2 split, file loaders and a synthetic corpus.

The synthetic corpus stands in for a chest X-ray collection: every topic owns
a pool of sentence templates built around topic keywords, and every report's
image pair renders its topic as an oriented stripe texture plus one mark per
sentence, so both text clustering and image classification are learnable.
"""

from __future__ import annotations

import csv
import json
import logging
import re
import struct
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
SGFI_MAGIC = b"SGFI"

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:['\-][a-z0-9]+)*|[^\sa-z0-9]")


class DataError(Exception):
    """Malformed or missing corpus data."""


@dataclass(frozen=True)
class ReportRecord:
    id: str
    text: str
    images: tuple[str | None, str | None]
    tokens: tuple[int, ...] = ()

    @property
    def words(self) -> list[str]:
        return tokenize(self.text)


@dataclass
class Vocabulary:
    itos: list[str]
    min_frequency: int = 3
    stoi: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.itos[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    @property
    def special_ids(self) -> tuple[int, ...]:
        return (PAD, BOS, EOS, UNK)

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode(self, words: Sequence[str], max_len: int = 60) -> tuple[int, ...]:
        """Wrap ids in BOS/EOS; overlong reports are cut at the last full sentence."""
        ids = [self.id(w) for w in words]
        budget = max_len - 2
        if len(ids) > budget:
            cut = budget
            for i in range(budget - 1, -1, -1):
                if words[i] == ".":
                    cut = i + 1
                    break
            ids = ids[:cut]
        return (BOS, *ids, EOS)

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out

    def to_json(self) -> str:
        return json.dumps({"itos": self.itos, "min_frequency": self.min_frequency}, indent=0)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        obj = json.loads(text)
        return cls(list(obj["itos"]), int(obj["min_frequency"]))


@dataclass(frozen=True)
class CorpusSplit:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]
    ratios: tuple[int, int, int] = (7, 1, 2)

    def to_json(self) -> str:
        return json.dumps({"train": list(self.train), "validation": list(self.validation),
                           "test": list(self.test), "ratios": list(self.ratios)})

    @classmethod
    def from_json(cls, text: str) -> "CorpusSplit":
        obj = json.loads(text)
        return cls(tuple(obj["train"]), tuple(obj["validation"]), tuple(obj["test"]),
                   tuple(obj.get("ratios", (7, 1, 2))))

    def ids(self, name: str) -> tuple[str, ...]:
        return {"train": self.train, "validation": self.validation, "val": self.validation,
                "test": self.test}[name]


def tokenize(text: str) -> list[str]:
    """Lowercase, keep words (with inner hyphens/apostrophes) and split out punctuation."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(words: Sequence[str]) -> str:
    out = ""
    for w in words:
        if out and (w[0].isalnum()):
            out += " "
        out += w
    return out


def build_vocabulary(train_records: Sequence[ReportRecord], min_frequency: int = 3) -> Vocabulary:
    if not train_records:
        raise DataError("cannot build a vocabulary from an empty training set")
    counts = Counter()
    for r in train_records:
        counts.update(r.words)
    kept = sorted((t for t, c in counts.items() if c >= min_frequency), key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIALS) + kept, min_frequency)


def encode_records(records: Sequence[ReportRecord], vocab: Vocabulary, max_len: int = 60) -> list[ReportRecord]:
    return [replace(r, tokens=vocab.encode(r.words, max_len)) for r in records]


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = (7 * n + 5) // 10
    n_val = max(1, (n + 5) // 10)
    return n_train, n_val, n - n_train - n_val


def split_corpus(records: Sequence[ReportRecord], seed: int) -> CorpusSplit:
    if len(records) < 10:
        raise DataError(f"need at least 10 records to split 7:1:2, got {len(records)}")
    ids = [r.id for r in records]
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train, n_val, _ = split_sizes(len(ids))
    shuffled = [ids[i] for i in order]
    return CorpusSplit(tuple(shuffled[:n_train]), tuple(shuffled[n_train:n_train + n_val]),
                       tuple(shuffled[n_train + n_val:]))


# ---------------------------------------------------------------------------
# image files
# ---------------------------------------------------------------------------

def write_sgfi(path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(SGFI_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_sgfi(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != SGFI_MAGIC:
        raise DataError(f"{path}: not an SGFI tensor file")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    shape = struct.unpack_from(f"<{ndim}I", raw, 8)
    offset = 8 + 4 * ndim
    count = int(np.prod(shape))
    if len(raw) - offset != 4 * count:
        raise DataError(f"{path}: payload size does not match header shape {shape}")
    return np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)


def read_image(path) -> np.ndarray:
    """Load an image as a float32 (channels, height, width) array in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing image file: {path}")
    if path.suffix.lower() == ".sgfi":
        return read_sgfi(path)
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_png(path, array: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.asarray(array).transpose(1, 2, 0), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


class FileImages:
    """Resolves image references relative to a corpus directory."""

    def __init__(self, root):
        self.root = Path(root)

    def __call__(self, ref: str) -> np.ndarray:
        return read_image(self.root / ref)


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------

@dataclass
class LoadedCorpus:
    records: list[ReportRecord]
    dropped: int
    root: Path

    @property
    def images(self) -> FileImages:
        return FileImages(self.root)


def load_iuxray_shaped(path) -> LoadedCorpus:
    """Read ``corpus.jsonl`` (or the given .jsonl file) with its image files.

    Reports lacking either view are dropped and counted; a missing image file
    or an unparsable line raises :class:`DataError`.
    """
    path = Path(path)
    jsonl = path / "corpus.jsonl" if path.is_dir() else path
    if not jsonl.exists():
        raise DataError(f"corpus file not found: {jsonl}")
    root = jsonl.parent
    records, dropped = [], 0
    with open(jsonl, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rid, report = str(obj["id"]), str(obj["report"])
                ap, lat = obj.get("image_ap"), obj.get("image_lat")
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{jsonl}:{lineno}: malformed record ({exc})") from None
            if not ap or not lat:
                dropped += 1
                continue
            for ref in (ap, lat):
                if not (root / ref).exists():
                    raise DataError(f"{jsonl}:{lineno}: missing image file {ref}")
            records.append(ReportRecord(rid, report, (ap, lat)))
    if dropped:
        logger.warning("dropped %d report(s) without both image views", dropped)
    return LoadedCorpus(records, dropped, root)


def write_corpus(directory, records: Sequence[ReportRecord], images, labels: dict[str, int] | None = None,
                 image_format: str = "sgfi") -> None:
    """Write ``corpus.jsonl`` plus image files (and ``labels.csv`` when given)."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    with open(directory / "corpus.jsonl", "w", encoding="utf-8") as fh:
        for r in records:
            refs = []
            for view, ref in zip(("ap", "lat"), r.images):
                rel = f"images/{r.id}_{view}.{image_format}"
                arr = images(ref)
                if image_format == "sgfi":
                    write_sgfi(directory / rel, arr)
                else:
                    write_png(directory / rel, arr)
                refs.append(rel)
            fh.write(json.dumps({"id": r.id, "report": r.text, "image_ap": refs[0], "image_lat": refs[1]}) + "\n")
    if labels is not None:
        with open(directory / "labels.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "topic"])
            for r in records:
                w.writerow([r.id, labels[r.id]])


def read_labels(path) -> dict[str, int]:
    with open(path, newline="") as fh:
        return {row["id"]: int(row["topic"]) for row in csv.DictReader(fh)}


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

_KEYWORDS = (
    "heart enlarged cardiomegaly silhouette contour "
    "lungs clear hyperinflated emphysema bullae "
    "pleural effusion blunting costophrenic meniscus "
    "pneumothorax apical lucency collapse pleura "
    "consolidation airspace opacity lobar bronchograms "
    "nodule calcified granuloma hilar lymph "
    "atelectasis basilar linear subsegmental scarring "
    "spine degenerative osteophytes vertebral kyphosis "
    "edema vascular congestion interstitial kerley "
    "catheter tube picc tip terminates "
    "aorta tortuous calcification arch unfolded "
    "fracture rib healed callus deformity "
    "diaphragm elevated hemidiaphragm eventration flattening "
    "mediastinum widened mass paratracheal stripe "
    "pneumonia infiltrate infection patchy retrocardiac "
    "sternotomy wires cabg clips postoperative"
).split()

# {A}..{E} are topic keywords, {M} an optional shared modifier (a noise word)
_FRAMES = (
    "the {A} is {M} {B} .",
    "no evidence of {M} {C} or {D} .",
    "there is {M} {E} in the {A} .",
    "{B} {C} is {M} seen .",
    "the {D} appears {M} {E} .",
    "findings are consistent with {M} {A} {C} .",
    "{E} {B} is {M} noted .",
    "the {C} is {M} unchanged from prior .",
    "there may be {M} {D} near the {B} .",
    "{A} and {E} are {M} present .",
)
_MODIFIERS = ("mild", "small", "stable", "new", "minimal", "subtle", "chronic", "focal")
_MAX_SENTENCES = 5


def topic_keywords(topic: int) -> list[str]:
    if 5 * topic + 5 <= len(_KEYWORDS):
        return list(_KEYWORDS[5 * topic: 5 * topic + 5])
    return [f"finding{topic}{c}" for c in "abcde"]


def topic_sentence(topic: int, template: int, modifier: int) -> str:
    """``modifier`` is 0 for none, otherwise 1-based into the modifier pool."""
    a, b, c, d, e = topic_keywords(topic)
    m = _MODIFIERS[modifier - 1] if modifier else ""
    s = _FRAMES[template].format(A=a, B=b, C=c, D=d, E=e, M=m)
    return " ".join(s.split())


def _sentence_text(sentence: str) -> str:
    body = sentence[:-2]
    return body[0].upper() + body[1:] + "."


@dataclass
class SyntheticCorpus:
    records: list[ReportRecord]
    labels: dict[str, int]
    layouts: dict[str, tuple[tuple[int, int], ...]]
    num_topics: int
    seed: int
    image_size: tuple[int, int, int] = (3, 64, 64)
    noise: float = 0.15

    def __call__(self, ref: str) -> np.ndarray:
        return self.load_image(ref)

    def load_image(self, ref: str) -> np.ndarray:
        rid, view = ref.removeprefix("synth:").rsplit("/", 1)
        return render_synthetic_image(self.labels[rid], self.layouts[rid], view, self.num_topics,
                                      self.image_size, self.noise, (self.seed, int(rid.split("-")[-1])))


def render_synthetic_image(topic: int, layout: Sequence[tuple[int, int]], view: str, num_topics: int,
                           image_size=(3, 64, 64), noise: float = 0.15, noise_seed=(0, 0)) -> np.ndarray:
    """Stripe texture for the topic plus, per sentence slot, a template mark and a modifier mark."""
    c, h, w = image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= h
    xx /= w
    theta = np.pi * topic / num_topics
    freq = 4.0 + (topic % 3)
    phase = 0.0 if view == "ap" else np.pi / 2
    img = 0.3 + 0.25 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    band = h / _MAX_SENTENCES
    for slot, (template, modifier) in enumerate(layout[:_MAX_SENTENCES]):
        y0 = int(slot * band)
        cell = w / len(_FRAMES)
        x0 = int(template * cell + cell * 0.2)
        img[y0 + int(band * 0.1): y0 + int(band * 0.55), x0: x0 + max(2, int(cell * 0.6))] = 1.0
        if modifier:
            mcell = w / (len(_MODIFIERS) + 1)
            mx = int(modifier * mcell + mcell * 0.25)
            shade = 0.0 if view == "ap" else 1.0
            img[y0 + int(band * 0.65): y0 + int(band * 0.95), mx: mx + max(2, int(mcell * 0.5))] = shade
    if view != "ap":
        img = img[:, ::-1]
    rng = np.random.default_rng([noise_seed[0], noise_seed[1], 0 if view == "ap" else 1])
    out = np.repeat(img[None], c, axis=0) + rng.normal(0.0, noise, size=(c, h, w))
    return np.ascontiguousarray(out, dtype=np.float32)


def generate_synthetic_corpus(num_topics: int, reports_per_topic: int, seed: int,
                              image_size=(3, 64, 64), noise: float = 0.15) -> SyntheticCorpus:
    if num_topics < 2:
        raise ValueError("num_topics must be at least 2")
    if reports_per_topic < 1:
        raise ValueError("reports_per_topic must be positive")
    rng = np.random.default_rng(seed)
    records, labels, layouts = [], {}, {}
    idx = 0
    for topic in range(num_topics):
        for _ in range(reports_per_topic):
            n_sent = int(rng.integers(3, _MAX_SENTENCES + 1))
            templates = rng.choice(len(_FRAMES), size=n_sent, replace=False)
            mods = [int(rng.integers(1, len(_MODIFIERS) + 1)) if rng.random() < 0.5 else 0 for _ in templates]
            layout = tuple((int(t), m) for t, m in zip(templates, mods))
            text = " ".join(_sentence_text(topic_sentence(topic, t, m)) for t, m in layout)
            rid = f"synth-{idx:05d}"
            records.append(ReportRecord(rid, text, (f"synth:{rid}/ap", f"synth:{rid}/lat")))
            labels[rid] = topic
            layouts[rid] = layout
            idx += 1
    return SyntheticCorpus(records, labels, layouts, num_topics, seed, tuple(image_size), noise)
