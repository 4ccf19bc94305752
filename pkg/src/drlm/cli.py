"""Command-line entry point: ``drlm {train,eval-lm,tag,gradcheck,synth,grid}``.

Settings come from a flat ``key = value`` file (``--config``), then
``--set key=value`` overrides, then the named flags.  Relative paths in the
config file are taken relative to that file.  Every report line is
``key=value`` pairs separated by spaces.

Exit codes: 0 success, 1 user or configuration error, 2 internal failure
(including a failed gradient check).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import corpus
from .autodiff import ShapeError, gradient_errors
from .corpus import CorpusFormatError, Document, RawDocument
from .inference import tag_document
from .metrics import (
    ConfusionCounts,
    accuracy,
    binomial_test,
    macro_f1,
    paired_outcomes,
    perplexity,
    read_predictions,
    write_predictions,
)
from .model import VARIANTS, CheckpointError, ModelDims, load_checkpoint, save_checkpoint
from .training import (
    GRID,
    TrainConfig,
    corpus_log_likelihood,
    fit,
    init_params,
    objective,
    scored_slots,
    token_count,
)

log = logging.getLogger(__name__)

GRADCHECK_LIMITS = {"model.V": 20, "model.K": 8, "model.H": 8, "gradcheck.T": 3}

# key -> (type, default); None default means "unset"
SETTINGS = {
    "seed": (int, 0),
    "model.variant": (str, "drlm"),
    "model.K": (int, 32),
    "model.H": (int, 32),
    "model.V": (int, 12),
    "model.Z": (int, 3),
    "train.objective": (str, "joint"),
    "train.learning_rate": (float, 0.1),
    "train.clip": (float, 5.0),
    "train.dropout": (float, 0.5),
    "train.epochs": (int, 5),
    "train.include_dummy": (bool, True),
    "train.dummy_label": (int, 0),
    "train.vocab_cap": (int, 10_000),
    "paths.train": (Path, None),
    "paths.dev": (Path, None),
    "paths.test": (Path, None),
    "paths.vocab": (Path, None),
    "paths.labels": (Path, None),
    "paths.checkpoint": (Path, None),
    "paths.predictions": (Path, None),
    "paths.baseline_predictions": (Path, None),
    "paths.log": (Path, None),
    "paths.out": (Path, Path("synthetic")),
    "synth.Z": (int, 3),
    "synth.vocab_per_relation": (int, 100),
    "synth.train_docs": (int, 400),
    "synth.dev_docs": (int, 50),
    "synth.test_docs": (int, 50),
    "synth.sentences_per_doc": (int, 6),
    "synth.min_len": (int, 4),
    "synth.max_len": (int, 10),
    "synth.shared_vocab": (int, 0),
    "synth.shared_mass": (float, 0.0),
    "synth.peak": (float, 0.8),
    "gradcheck.T": (int, 3),
    "gradcheck.max_len": (int, 2),
    "gradcheck.step": (float, 1e-5),
    "gradcheck.tolerance": (float, 1e-4),
    "grid.values": (str, ",".join(map(str, GRID))),
}


class UserError(Exception):
    """Bad configuration or input; exit code 1."""


class CheckFailed(Exception):
    """A verification command found a violation; exit code 2."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(key: str, raw: str, base: Optional[Path] = None):
    if key not in SETTINGS:
        raise UserError(f"unknown setting {key!r}")
    kind = SETTINGS[key][0]
    try:
        if kind is bool:
            return _parse_bool(raw)
        if kind is Path:
            path = Path(raw.strip()).expanduser()
            return base / path if base is not None and not path.is_absolute() else path
        return kind(raw.strip())
    except ValueError as exc:
        raise UserError(f"{key}: {exc}") from None


class RunConfig:
    """Resolved settings plus a record of which keys were given explicitly."""

    def __init__(self):
        self.values = {k: default for k, (_, default) in SETTINGS.items()}
        self.explicit: set[str] = set()

    def set(self, key: str, raw: str, base: Optional[Path] = None):
        self.values[key] = _convert(key, raw, base)
        self.explicit.add(key)

    def __getitem__(self, key):
        return self.values[key]

    def load_file(self, path: Path):
        if not path.is_file():
            raise UserError(f"config file {path} not found")
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UserError(f"{path}:{lineno}: expected key = value")
                key, raw = (part.strip() for part in line.split("=", 1))
                try:
                    self.set(key, raw, base=path.parent)
                except UserError as exc:
                    raise UserError(f"{path}:{lineno}: {exc}") from None

    def require_path(self, key: str, must_exist: bool = True) -> Path:
        path = self.values[key]
        if path is None:
            raise UserError(f"{key} is not set")
        if must_exist and not path.exists():
            raise UserError(f"{key}: {path} does not exist")
        return path

    def derived_path(self, key: str, suffix: str) -> Path:
        """An explicit path, or one next to the checkpoint."""
        if self.values[key] is not None:
            return self.values[key]
        return Path(str(self.require_path("paths.checkpoint", must_exist=False)) + suffix)

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                objective=self["train.objective"],
                learning_rate=self["train.learning_rate"],
                clip=self["train.clip"],
                dropout=self["train.dropout"],
                epochs=self["train.epochs"],
                seed=self["seed"],
                include_dummy=self["train.include_dummy"],
                dummy_label=self["train.dummy_label"],
            )
        except ValueError as exc:
            raise UserError(str(exc)) from None

    def variant(self) -> str:
        variant = self["model.variant"]
        if variant not in VARIANTS:
            raise UserError(f"model.variant must be one of {', '.join(VARIANTS)}, got {variant!r}")
        return variant


def report(out, **fields):
    parts = []
    for key, value in fields.items():
        if isinstance(value, float):
            value = f"{value:.10g}"
        parts.append(f"{key}={value}")
    print(" ".join(parts), file=out, flush=True)


# -- corpus plumbing ------------------------------------------------------------------


def _read(cfg: RunConfig, key: str) -> list[RawDocument]:
    return corpus.read_corpus(cfg.require_path(key))


def _labels_from(docs: list[RawDocument]) -> list[str]:
    seen = {name for doc in docs for name in doc.relations if name is not None}
    seen.discard(corpus.DUMMY_LABEL)
    return [corpus.DUMMY_LABEL, *sorted(seen)]


def _unlabeled(docs: list[RawDocument]) -> list[RawDocument]:
    return [RawDocument(doc.sentences, [None] * len(doc.sentences)) for doc in docs]


def _load_artifacts(cfg: RunConfig):
    """Checkpoint, vocabulary and label table, checked against each other."""
    ckpt = cfg.require_path("paths.checkpoint")
    model = load_checkpoint(ckpt)
    for key, have in (("model.variant", model.variant), ("model.K", model.dims.K), ("model.H", model.dims.H)):
        if key in cfg.explicit and cfg[key] != have:
            raise UserError(f"{key} mismatch: config has {cfg[key]}, checkpoint has {have}")
    vocab_path = cfg.derived_path("paths.vocab", ".vocab")
    if not vocab_path.exists():
        raise UserError(f"vocabulary {vocab_path} does not exist")
    vocab = corpus.Vocabulary.load(vocab_path)
    if len(vocab) != model.dims.V:
        raise UserError(f"vocabulary mismatch: {vocab_path} has {len(vocab)} entries, checkpoint V={model.dims.V}")
    labels = None
    labels_path = cfg.derived_path("paths.labels", ".labels")
    if labels_path.exists():
        labels = corpus.load_labels(labels_path)
        if model.relations > 1 and len(labels) != model.dims.Z:
            raise UserError(f"label mismatch: {labels_path} has {len(labels)} labels, checkpoint Z={model.dims.Z}")
    return model, vocab, labels


# -- commands --------------------------------------------------------------------------


def _train_one(cfg: RunConfig, K: int, H: int, out):
    """Fit one model; returns (FitResult, vocab, labels)."""
    variant = cfg.variant()
    train_raw, dev_raw = _read(cfg, "paths.train"), _read(cfg, "paths.dev")
    vocab = corpus.build_vocab(train_raw, cfg["train.vocab_cap"])
    if cfg["paths.labels"] is not None:
        labels = corpus.load_labels(cfg.require_path("paths.labels"))
    else:
        labels = _labels_from(train_raw)
    if variant in ("rnnlm", "dclm"):
        Z = 1
        train_raw, dev_raw = _unlabeled(train_raw), _unlabeled(dev_raw)
    else:
        Z = len(labels)
        if Z < 2:
            raise UserError(f"{variant} needs at least two relation labels, found {labels}")
    train = corpus.encode(train_raw, vocab, labels).documents
    dev = corpus.encode(dev_raw, vocab, labels).documents
    config = cfg.train_config()
    if config.objective == "conditional" and Z == 1:
        raise UserError(f"{variant} has no relation variable; use train.objective=joint")
    if not 0 <= config.dummy_label < Z:
        raise UserError(f"train.dummy_label={config.dummy_label} outside [0, {Z})")
    try:
        dims = ModelDims(len(vocab), K, H, Z)
    except ValueError as exc:
        raise UserError(str(exc)) from None
    model = init_params(dims, cfg["seed"], variant)
    log_fh = open(cfg["paths.log"], "w", encoding="utf-8") if cfg["paths.log"] else None

    def on_epoch(line):
        print(line, file=out, flush=True)
        if log_fh is not None:
            log_fh.write(line + "\n")

    try:
        result = fit(model, train, dev, config, on_epoch)
    finally:
        if log_fh is not None:
            log_fh.close()
    return result, vocab, labels


def _save_run(cfg: RunConfig, result, vocab, labels):
    ckpt = cfg.require_path("paths.checkpoint", must_exist=False)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, ckpt)
    vocab.save(cfg.derived_path("paths.vocab", ".vocab"))
    if cfg["paths.labels"] is None:
        corpus.save_labels(labels, cfg.derived_path("paths.labels", ".labels"))
    return ckpt


def cmd_train(cfg: RunConfig, out) -> int:
    result, vocab, labels = _train_one(cfg, cfg["model.K"], cfg["model.H"], out)
    ckpt = _save_run(cfg, result, vocab, labels)
    best = result.history[result.best_epoch]
    report(out, checkpoint=ckpt, best_epoch=result.best_epoch, **{f"dev_{result.metric}": best.dev_metric})
    return 0


def cmd_grid(cfg: RunConfig, out) -> int:
    try:
        values = [int(v) for v in cfg["grid.values"].split(",") if v.strip()]
    except ValueError:
        raise UserError(f"grid.values must be comma-separated integers, got {cfg['grid.values']!r}") from None
    if not values:
        raise UserError("grid.values is empty")
    best = None
    for K in values:
        for H in values:
            result, vocab, labels = _train_one(cfg, K, H, out)
            metric = result.history[result.best_epoch].dev_metric
            report(out, K=K, H=H, best_epoch=result.best_epoch, **{f"dev_{result.metric}": metric})
            score = -metric if result.metric == "perplexity" else metric
            if best is None or score > best[0]:
                best = (score, K, H, result, vocab, labels, metric)
    _, K, H, result, vocab, labels, metric = best
    ckpt = _save_run(cfg, result, vocab, labels)
    report(out, best_K=K, best_H=H, checkpoint=ckpt, **{f"dev_{result.metric}": metric})
    return 0


def cmd_eval_lm(cfg: RunConfig, out) -> int:
    model, vocab, _ = _load_artifacts(cfg)
    raw = _unlabeled(_read(cfg, "paths.test"))
    docs = corpus.encode(raw, vocab, [], keep_missing=True).documents
    total = corpus_log_likelihood(model, docs)
    tokens = token_count(docs)
    report(out, perplexity=perplexity(total, tokens), tokens=tokens, log_likelihood=total, documents=len(docs))
    return 0


def cmd_tag(cfg: RunConfig, out) -> int:
    model, vocab, labels = _load_artifacts(cfg)
    if model.relations < 2:
        raise UserError(f"{model.variant} checkpoint has no relation variable to tag")
    if labels is None:
        raise UserError("label table not found; set paths.labels")
    docs = corpus.encode(_read(cfg, "paths.test"), vocab, labels, keep_missing=True).documents
    missing = [f"{d.doc_id}:{t}" for d in docs for t, z in enumerate(d.relations) if z is None]
    if missing:
        shown = ",".join(missing[:20]) + (",..." if len(missing) > 20 else "")
        raise UserError(f"{len(missing)} slots lack gold labels (document:slot): {shown}")
    include, dummy = cfg["train.include_dummy"], cfg["train.dummy_label"]
    rows, gold, pred = [], [], []
    tags = {}
    for doc, t, z in scored_slots(docs, include, dummy):
        if doc.doc_id not in tags:
            tags[doc.doc_id] = tag_document(model, doc)
        p = tags[doc.doc_id][t]
        gold.append(z)
        pred.append(p)
        rows.append((doc.doc_id, t, labels[z], labels[p]))
    if not rows:
        raise UserError("no slots to score")
    pred_path = cfg.derived_path("paths.predictions", ".predictions.tsv")
    write_predictions(rows, pred_path)
    counts = ConfusionCounts.from_labels(gold, pred, model.dims.Z)
    classes = None if include else [k for k in range(model.dims.Z) if k != dummy]
    fields = dict(
        predictions=pred_path,
        slots=len(rows),
        accuracy=accuracy(gold, pred),
        macro_f1=macro_f1(counts, classes) if model.dims.Z - (0 if include else 1) >= 2 else float("nan"),
    )
    baseline = cfg["paths.baseline_predictions"]
    if baseline is not None:
        fields.update(_compare(rows, cfg.require_path("paths.baseline_predictions")))
    report(out, **fields)
    return 0


def _compare(rows, baseline_path: Path) -> dict:
    """Sign test of these predictions against a baseline prediction file."""
    other = {(doc, slot): p for doc, slot, _, p in read_predictions(baseline_path)}
    gold, ours, theirs = [], [], []
    for doc, slot, g, p in rows:
        if (doc, slot) not in other:
            raise UserError(f"{baseline_path} has no prediction for document {doc} slot {slot}")
        gold.append(g)
        ours.append(p)
        theirs.append(other[(doc, slot)])
    wins, losses, n = paired_outcomes(gold, ours, theirs)
    return dict(wins=wins, losses=losses, p_value=binomial_test(wins, losses, n))


def _group(name: str) -> str:
    head, _, tail = name.rpartition(".")
    return head if head and tail.isdigit() else name


def cmd_gradcheck(cfg: RunConfig, out) -> int:
    for key, limit in GRADCHECK_LIMITS.items():
        if cfg[key] > limit:
            raise UserError(f"{key}={cfg[key]} exceeds the gradient-check limit {limit}")
    V, K, H, Z, T = (cfg[k] for k in ("model.V", "model.K", "model.H", "model.Z", "gradcheck.T"))
    if V <= corpus.EOS_ID + 1 or Z < 2 or T < 1 or cfg["gradcheck.max_len"] < 1:
        raise UserError("gradient check needs V > 4, Z >= 2, T >= 1 and gradcheck.max_len >= 1")
    dims = ModelDims(V, K, H, Z)
    rng = np.random.default_rng(cfg["seed"])
    lengths = rng.integers(1, cfg["gradcheck.max_len"] + 1, size=T)
    sentences = [[int(w) for w in rng.integers(corpus.EOS_ID + 1, V, size=n)] + [corpus.EOS_ID] for n in lengths]
    doc = Document(sentences, [int(z) for z in rng.integers(0, Z, size=T)], "gradcheck")
    variants = [cfg.variant()] if "model.variant" in cfg.explicit else ["drlm", "drlm-model2"]
    objectives = [cfg["train.objective"]] if "train.objective" in cfg.explicit else ["joint", "conditional"]
    tol = cfg["gradcheck.tolerance"]
    worst = ("", "", -1.0)
    for variant in variants:
        model = init_params(dims, cfg["seed"], variant)
        for obj in objectives:
            try:
                config = TrainConfig(objective=obj, dropout=0.0)
            except ValueError as exc:
                raise UserError(str(exc)) from None
            if obj == "conditional" and model.relations < 2:
                raise UserError(f"{variant} has no relation variable for the conditional objective")
            errors = gradient_errors(
                lambda tape: objective(model, tape, doc, config), model.params, cfg["gradcheck.step"]
            )
            groups: dict[str, float] = {}
            for name, err in errors.items():
                groups[_group(name)] = max(groups.get(_group(name), 0.0), err)
            for group, err in groups.items():
                report(out, check=f"{variant}/{obj}", param=group, max_rel_error=err)
                if err > worst[2]:
                    worst = (f"{variant}/{obj}", group, err)
    status = "pass" if worst[2] < tol else "fail"
    report(out, worst_check=worst[0], worst_param=worst[1], worst_error=worst[2], status=status)
    if status == "fail":
        raise CheckFailed(f"gradient check failed: {worst[0]} {worst[1]} relative error {worst[2]:.3g} >= {tol}")
    return 0


def cmd_synth(cfg: RunConfig, out) -> int:
    sizes = {split: cfg[f"synth.{split}_docs"] for split in ("train", "dev", "test")}
    if min(sizes.values()) < 1:
        raise UserError("every split needs at least one document")
    try:
        synth = corpus.generate_synthetic(
            seed=cfg["seed"],
            Z=cfg["synth.Z"],
            vocab_per_relation=cfg["synth.vocab_per_relation"],
            docs=sum(sizes.values()),
            sentences_per_doc=cfg["synth.sentences_per_doc"],
            length_range=(cfg["synth.min_len"], cfg["synth.max_len"]),
            shared_vocab=cfg["synth.shared_vocab"],
            shared_mass=cfg["synth.shared_mass"],
            peak=cfg["synth.peak"],
        )
    except ValueError as exc:
        raise UserError(str(exc)) from None
    out_dir = cfg["paths.out"]
    out_dir.mkdir(parents=True, exist_ok=True)
    start = 0
    for split, n in sizes.items():
        path = out_dir / f"{split}.jsonl"
        corpus.write_corpus(synth.documents[start : start + n], path)
        report(out, split=split, path=path, documents=n)
        start += n
    corpus.save_labels(synth.labels, out_dir / "labels.txt")
    manifest = dict(synth.manifest, splits=sizes)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    report(out, labels=out_dir / "labels.txt", manifest=out_dir / "manifest.json")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval-lm": cmd_eval_lm,
    "tag": cmd_tag,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
    "grid": cmd_grid,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drlm", description="Discourse relation language model toolkit")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, help="key = value settings file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--checkpoint", type=Path)
    parser.add_argument("--variant", choices=VARIANTS)
    parser.add_argument("--objective", choices=("joint", "conditional"))
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config is not None:
        cfg.load_file(args.config)
    for item in args.overrides:
        if "=" not in item:
            raise UserError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        cfg.set(key.strip(), raw)
    for key, value in (
        ("seed", args.seed),
        ("paths.checkpoint", args.checkpoint),
        ("model.variant", args.variant),
        ("train.objective", args.objective),
    ):
        if value is not None:
            cfg.set(key, str(value))
    return cfg


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, out)
    except CheckFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ShapeError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2
    except (UserError, CorpusFormatError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
