"""Command line: synth, distill, train, generate, evaluate, inspect.

A run directory collects everything one experiment produces.  ``distill``
creates it (split, vocabulary, resolved config, topic files); later commands
read what they need from it and append their outputs to ``manifest.json``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import corpus as C
from . import trainer as TR
from .embedder import read_embeddings_csv
from .hdbscan import read_topics_csv, topic_similarity_matrix, write_matrix_csv
from .generator import read_attention_csv

logger = logging.getLogger("reportgen")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
VERSION = f"reportgen {__version__}"
SECTIONS = ("train", "vision", "transformer", "umap", "hdbscan")


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _coerce(text: str, hint: str, name: str):
    text = text.strip()
    try:
        if "None" in hint and text.lower() in ("none", ""):
            return None
        if hint.startswith("bool"):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint.startswith("tuple"):
            return tuple(int(x) for x in text.replace("x", ",").split(",") if x.strip())
        if hint.startswith("int"):
            return int(text)
        if hint.startswith("float"):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{name}: cannot read {text!r} as {hint}") from None


def _replace(obj, section: str, values: dict[str, str]):
    hints = {f.name: str(f.type) for f in dataclasses.fields(obj)}
    changes = {}
    for key, text in values.items():
        if key not in hints or key in SECTIONS:
            raise ConfigError(f"unknown key {section}.{key}")
        changes[key] = _coerce(text, hints[key], f"{section}.{key}")
    try:
        return dataclasses.replace(obj, **changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def apply_overrides(cfg: TR.TrainConfig, sections: dict[str, dict[str, str]]) -> TR.TrainConfig:
    for section, values in sections.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        if not values:
            continue
        if section == "train":
            cfg = _replace(cfg, section, values)
        else:
            cfg = dataclasses.replace(cfg, **{section: _replace(getattr(cfg, section), section, values)})
    return cfg


def read_config_file(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return {s: dict(parser.items(s)) for s in parser.sections()}


def parse_sets(items) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        out.setdefault(section, {})[name] = value
    return out


def resolve_config(args, base: TR.TrainConfig | None = None) -> TR.TrainConfig:
    if base is None:
        preset = getattr(args, "preset", None) or "desk"
        if preset not in TR.PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        base = TR.PRESETS[preset]
    cfg = base
    if getattr(args, "config", None):
        cfg = apply_overrides(cfg, read_config_file(args.config))
    cfg = apply_overrides(cfg, parse_sets(getattr(args, "set", None)))
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    try:
        return cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def write_config_ini(path, cfg: TR.TrainConfig) -> None:
    """The resolved configuration in the same format the --config flag reads."""
    parser = configparser.ConfigParser()
    d = cfg.to_dict()
    parser["train"] = {k: _ini_value(v) for k, v in d.items() if k not in SECTIONS}
    for s in SECTIONS[1:]:
        parser[s] = {k: _ini_value(v) for k, v in d[s].items()}
    with open(path, "w") as fh:
        parser.write(fh)


def _ini_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return "none" if v is None else str(v)


# ---------------------------------------------------------------------------
# run directory
# ---------------------------------------------------------------------------

class Run:
    def __init__(self, path):
        self.path = Path(path)

    def file(self, name: str) -> Path:
        return self.path / name

    def require(self, name: str) -> Path:
        p = self.file(name)
        if not p.exists():
            raise C.DataError(f"{p} not found; run the earlier pipeline steps first")
        return p

    def config(self) -> TR.TrainConfig:
        return TR.TrainConfig.from_dict(json.loads(self.require("config.json").read_text()))

    def manifest(self) -> dict:
        p = self.file("manifest.json")
        return json.loads(p.read_text()) if p.exists() else {}

    def record(self, command: str, cfg: TR.TrainConfig, outputs, **extra) -> None:
        m = self.manifest()
        m["version"] = VERSION
        m["config_sha256"] = cfg.digest()
        m["seeds"] = {"train": cfg.seed, "split": cfg.seed, "umap": cfg.umap.seed + cfg.seed,
                      "embedder": cfg.seed}
        m.setdefault("outputs", {})[command] = sorted(str(o) for o in outputs)
        m.update(extra)
        self.file("manifest.json").write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")

    def corpus(self) -> C.LoadedCorpus:
        path = self.manifest().get("corpus")
        if not path:
            raise C.DataError(f"{self.path}: manifest names no corpus; run distill first")
        return C.load_iuxray_shaped(path)

    def split_records(self, loaded: C.LoadedCorpus) -> dict[str, list[C.ReportRecord]]:
        split = C.CorpusSplit.from_json(self.require("split.json").read_text())
        by_id = {r.id: r for r in loaded.records}
        out = {}
        for name in ("train", "validation", "test"):
            missing = [i for i in split.ids(name) if i not in by_id]
            if missing:
                raise C.DataError(f"split lists {len(missing)} id(s) absent from the corpus, e.g. {missing[0]}")
            out[name] = [by_id[i] for i in split.ids(name)]
        return out

    def vocab(self) -> C.Vocabulary:
        return C.Vocabulary.from_json(self.require("vocab.json").read_text())


def _dataset(records, loaded, vocab, cfg) -> TR.Dataset:
    data = TR.build_dataset(records, loaded.images, vocab, cfg.transformer.max_len)
    if tuple(data.images.shape[2:]) != tuple(cfg.vision.image_size):
        raise C.DataError(f"corpus images are {data.images.shape[2:]}, config expects {cfg.vision.image_size}")
    return data


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    size = tuple(int(x) for x in args.image_size.split(","))
    sc = C.generate_synthetic_corpus(args.topics, args.per_topic, args.seed, image_size=size, noise=args.noise)
    C.write_corpus(args.out, sc.records, sc, sc.labels, image_format=args.image_format)
    print(f"wrote {len(sc.records)} reports to {args.out}")
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = resolve_config(args)
    run = Run(args.run)
    run.path.mkdir(parents=True, exist_ok=True)
    loaded = C.load_iuxray_shaped(args.corpus)
    split = C.split_corpus(loaded.records, cfg.seed)
    by_id = {r.id: r for r in loaded.records}
    train = [by_id[i] for i in split.train]
    vocab = TR.vocabulary_for(train, cfg)
    run.file("split.json").write_text(split.to_json())
    run.file("vocab.json").write_text(vocab.to_json())
    run.file("config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    write_config_ini(run.file("config.ini"), cfg)
    result = TR.distill(train, vocab, cfg, run.path)
    outputs = ["split.json", "vocab.json", "config.json", "config.ini", "umap.csv", "topics.csv", "embeddings.csv"]
    if result.similarity is not None:
        outputs.append("topic_similarity.csv")
    run.record("distill", cfg, outputs, corpus=str(Path(args.corpus).resolve()),
               distill={"n_neighbors": cfg.umap.n_neighbors, "min_dist": cfg.umap.min_dist,
                        "min_cluster_size": cfg.hdbscan.min_cluster_size, "topics": result.assignment.k,
                        "noise": int((result.assignment.labels < 0).sum())})
    print(f"{result.assignment.k} topics over {len(train)} training reports "
          f"({int((result.assignment.labels < 0).sum())} noise)")
    return EXIT_OK


def cmd_train(args) -> int:
    run = Run(args.run)
    cfg = resolve_config(args, base=run.config())
    loaded = run.corpus()
    parts = run.split_records(loaded)
    vocab = run.vocab()
    topics = read_topics_csv(run.require("topics.csv"))
    num_topics = max(topics.values(), default=-1) + 1
    train_ids = {r.id for r in parts["train"]}
    if not set(topics) <= train_ids:
        raise C.DataError("topics.csv labels reports outside the training split")
    train_data = _dataset(parts["train"], loaded, vocab, cfg)
    val_data = _dataset(parts["validation"], loaded, vocab, cfg)
    state = None
    if args.resume and run.file("last.ckpt").exists():
        state = TR.load_checkpoint(run.file("last.ckpt")).state
    try:
        state = TR.train(cfg, vocab, train_data, val_data, topics, num_topics, run.path, state)
    except TR.NumericError as exc:
        dump = {"error": str(exc), "history": state.history if state else []}
        run.file("numeric_failure.json").write_text(json.dumps(dump, indent=2, default=float))
        raise
    run.file("history.json").write_text(json.dumps(state.history, indent=2, default=float))
    run.file("config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    run.record("train", cfg, ["best.ckpt", "last.ckpt", "history.json"],
               train={"epochs": state.epoch, "best_val": state.stopper.best, "topics": num_topics})
    print(f"trained {state.epoch} epoch(s); best validation loss {state.stopper.best:.4f}")
    return EXIT_OK


def _load_model(run: Run, which: str) -> TR.LoadedCheckpoint:
    return TR.load_checkpoint(run.require(f"{which}.ckpt"))


def cmd_generate(args) -> int:
    run = Run(args.run)
    ck = _load_model(run, args.checkpoint)
    loaded = run.corpus()
    data = _dataset(run.split_records(loaded)[args.split], loaded, ck.vocab, ck.cfg)
    model = ck.state.model.eval()
    if args.mode == "greedy":
        preds = TR.generate_reports(model, data)
    else:
        preds = []
        for i in range(len(data)):
            b = data.batch([i])
            feats = model.vision.encode_pair(b.images[:, 0], b.images[:, 1])
            toks, _ = model.generator.generate(model.generator.encode_visual(feats), "beam", args.width)
            preds.append(toks)
    out = run.file(args.out)
    with open(out, "w") as fh:
        for rid, p in zip(data.ids, preds):
            words = ck.vocab.decode(p)
            fh.write(json.dumps({"id": rid, "report": C.detokenize(words), "tokens": words}) + "\n")
    run.record("generate", ck.cfg, [args.out])
    print(f"wrote {len(preds)} reports to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run = Run(args.run)
    ck = _load_model(run, args.checkpoint)
    if args.attention and ck.cfg.transformer.memory_mode != "spatial":
        raise ConfigError("attention export needs transformer.memory_mode = spatial")
    loaded = run.corpus()
    data = _dataset(run.split_records(loaded)[args.split], loaded, ck.vocab, ck.cfg)
    out_dir = run.file(args.out)
    ev = TR.evaluate(ck.state.model, ck.vocab, data, ck.cfg.seed, out_dir, args.attention)
    outputs = [f"{args.out}/eval.json", f"{args.out}/eval.csv", f"{args.out}/similarity.csv"]
    outputs += [f"{args.out}/{p.name}" for p in sorted(out_dir.glob("attn_*.csv"))]
    run.record("evaluate", ck.cfg, outputs)
    for name, value in ev.report.corpus().items():
        print(f"{name:8s} {value:.4f}")
    print(f"mean S   {ev.mean_similarity:.4f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    run = Run(args.run)
    if args.attention:
        grid = run.config().vision.grid if run.file("config.json").exists() else 7
        words, maps = read_attention_csv(args.attention, grid)
        for w, m in zip(words, maps):
            view, r, c = np.unravel_index(int(np.argmax(m)), m.shape)
            print(f"{w:16s} {'ap' if view == 0 else 'lat'} ({r},{c}) {m.max():.3f}")
        return EXIT_OK
    emb = read_embeddings_csv(run.require("embeddings.csv"))
    topics = read_topics_csv(run.require("topics.csv"))
    ids = [i for i in topics if i in emb]
    if not ids:
        raise C.DataError("embeddings.csv and topics.csv share no ids")
    if max(topics[i] for i in ids) < 0:
        raise C.DataError("every report is noise; there is no topic similarity matrix")
    sim = topic_similarity_matrix(np.array([topics[i] for i in ids]), np.stack([emb[i] for i in ids]))
    out = run.file(args.out)
    write_matrix_csv(out, sim)
    dominant = all(sim[i, i] > np.delete(sim[i], i).max() for i in range(len(sim))) if len(sim) > 1 else True
    print(f"{len(sim)} topics; diagonal dominant: {dominant}; wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _config_flags(p: argparse.ArgumentParser, preset: bool = True) -> None:
    p.add_argument("--config", help="INI file with [train] [vision] [transformer] [umap] [hdbscan] sections")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)
    if preset:
        p.add_argument("--preset", choices=sorted(TR.PRESETS), default="desk")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reportgen", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=VERSION)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    p.add_argument("out")
    p.add_argument("--topics", type=int, default=8)
    p.add_argument("--per-topic", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", default="3,64,64")
    p.add_argument("--image-format", choices=["sgfi", "png"], default="sgfi")
    p.add_argument("--noise", type=float, default=0.15)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("distill", parents=[common], help="split and cluster training reports")
    p.add_argument("corpus")
    p.add_argument("run")
    _config_flags(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("train", parents=[common], help="train on a distilled run directory")
    p.add_argument("run")
    p.add_argument("--resume", action="store_true", help="continue from last.ckpt")
    _config_flags(p, preset=False)
    p.set_defaults(func=cmd_train)

    for name, func in (("generate", cmd_generate), ("evaluate", cmd_evaluate)):
        p = sub.add_parser(name, parents=[common], help=f"{name} reports for a split")
        p.add_argument("run")
        p.add_argument("--split", choices=["train", "validation", "test"], default="test")
        p.add_argument("--checkpoint", choices=["best", "last"], default="best")
        p.set_defaults(func=func)
    sub.choices["generate"].add_argument("--mode", choices=["greedy", "beam"], default="greedy")
    sub.choices["generate"].add_argument("--width", type=int, default=3)
    sub.choices["generate"].add_argument("--out", default="generated.jsonl")
    sub.choices["evaluate"].add_argument("--attention", type=int, default=0, metavar="N",
                                         help="export attention maps for the first N samples")
    sub.choices["evaluate"].add_argument("--out", default="eval")

    p = sub.add_parser("inspect", parents=[common],
                       help="re-emit the topic similarity matrix or summarize an attention file")
    p.add_argument("run")
    p.add_argument("--attention", help="attention CSV to summarize")
    p.add_argument("--out", default="topic_similarity.csv")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except C.DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TR.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
