"""Document ingestion, preprocessing, vocabulary and the synthetic corpus generator.

Corpus files hold one JSON document per line::

    {"sentences": [["the", "cat"], ["it", "sat"]], "relations": [null, "rel1"]}

Relation slot t labels the transition into sentence t; slot 0 pairs the first
sentence with the learned default context.
"""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

UNK, NUM, BOS, EOS = "UNK", "NUM", "<s>", "</s>"
RESERVED = (UNK, NUM, BOS, EOS)
UNK_ID, NUM_ID, BOS_ID, EOS_ID = range(4)
DUMMY_LABEL = "norel"

_NUMBER = re.compile(r"[+-]?(?:(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?|\.\d+)")


class CorpusFormatError(ValueError):
    pass


@dataclass
class RawDocument:
    sentences: list[list[str]]
    relations: list[Optional[str]]

    def __post_init__(self):
        self.sentences = [s.split() if isinstance(s, str) else list(s) for s in self.sentences]
        if len(self.relations) != len(self.sentences):
            raise CorpusFormatError(
                f"{len(self.sentences)} sentences but {len(self.relations)} relation slots"
            )


@dataclass
class Document:
    sentences: list[list[int]]
    relations: list[Optional[int]]
    doc_id: str = ""


@dataclass
class EncodedCorpus:
    documents: list[Document]
    labels: list[str]

    def __len__(self):
        return len(self.documents)

    def __iter__(self):
        return iter(self.documents)


def is_number(token: str) -> bool:
    return _NUMBER.fullmatch(token) is not None


def preprocess(tokens: Iterable[str]) -> list[str]:
    """Lowercase, and map every pure number to ``NUM``.  Idempotent."""
    out = []
    for tok in tokens:
        if tok in RESERVED:
            out.append(tok)
        elif is_number(tok):
            out.append(NUM)
        else:
            out.append(tok.lower())
    return out


class Vocabulary:
    def __init__(self, tokens: Sequence[str], counts: Optional[Counter] = None):
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError(f"vocabulary must start with the reserved tokens {RESERVED}")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        self.counts = counts if counts is not None else Counter()

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in preprocess(tokens)]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.writelines(tok + "\n" for tok in self.tokens)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.strip()])


def build_vocab(documents: Sequence[RawDocument], cap: int = 10_000) -> Vocabulary:
    """Keep the ``cap`` most frequent training tokens (ties broken alphabetically)."""
    if cap < 1:
        raise ValueError("cap must be at least 1")
    counts = Counter()
    for doc in documents:
        for sent in doc.sentences:
            counts.update(t for t in preprocess(sent) if t not in RESERVED)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts, key=lambda t: (-counts[t], t))[:cap]
    return Vocabulary([*RESERVED, *ranked], counts)


def save_labels(labels: Sequence[str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(name + "\n" for name in labels)


def load_labels(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def encode(
    documents: Sequence[RawDocument],
    vocab: Vocabulary,
    labels: Sequence[str],
    keep_missing: bool = False,
) -> EncodedCorpus:
    """Map tokens to ids, append ``</s>`` to each sentence and labels to indices.

    Absent labels become the dummy label (index 0) unless ``keep_missing``,
    in which case they stay ``None``.
    """
    label_index = {name: i for i, name in enumerate(labels)}
    encoded = []
    for d, doc in enumerate(documents):
        sentences = [vocab.encode(s) + [EOS_ID] for s in doc.sentences]
        relations = []
        for t, name in enumerate(doc.relations):
            if name is None:
                relations.append(None if keep_missing else 0)
            elif name in label_index:
                relations.append(label_index[name])
            else:
                raise CorpusFormatError(f"document {d}, slot {t}: unknown label {name!r}")
        encoded.append(Document(sentences, relations, str(d)))
    return EncodedCorpus(encoded, list(labels))


def decode_sentence(ids: Sequence[int], vocab: Vocabulary) -> list[str]:
    return [tok for tok in vocab.decode(ids) if tok != EOS]


def read_corpus(path) -> list[RawDocument]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                docs.append(RawDocument(obj["sentences"], obj["relations"]))
            except (json.JSONDecodeError, KeyError, TypeError, CorpusFormatError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed document ({exc})") from exc
    return docs


def write_corpus(documents: Iterable[RawDocument], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in documents:
            fh.write(json.dumps({"sentences": doc.sentences, "relations": doc.relations}) + "\n")


# -- synthetic corpora ---------------------------------------------------------------


@dataclass
class SyntheticCorpus:
    documents: list[RawDocument]
    stripped: list[RawDocument]
    labels: list[str]
    manifest: dict = field(default_factory=dict)


def synthetic_labels(Z: int) -> list[str]:
    return [DUMMY_LABEL] + [f"rel{z}" for z in range(1, Z)]


def generate_synthetic(
    seed: int = 0,
    Z: int = 3,
    vocab_per_relation: int = 100,
    docs: int = 100,
    sentences_per_doc: int = 6,
    length_range: tuple[int, int] = (4, 10),
    shared_vocab: int = 0,
    shared_mass: float = 0.0,
    peak: float = 0.8,
    zipf: float = 1.0,
) -> SyntheticCorpus:
    """Sample documents whose relations are recoverable from the words.

    Relation z owns a block of ``vocab_per_relation`` word types and emits
    sentences from a Zipfian unigram over that block (plus ``shared_mass`` on
    a block of ``shared_vocab`` words common to all relations).  The relation
    of sentence t depends only on the dominant block of sentence t-1: with
    probability ``peak`` it is the next relation cyclically, otherwise uniform
    over the rest.  The first slot is uniform.
    """
    if Z < 2:
        raise ValueError("synthetic corpora need Z >= 2")
    if shared_vocab == 0:
        shared_mass = 0.0
    rng = np.random.default_rng(seed)
    blocks = [[f"r{z}w{i}" for i in range(vocab_per_relation)] for z in range(Z)]
    shared = [f"s{i}" for i in range(shared_vocab)]
    owner = {w: z for z, block in enumerate(blocks) for w in block}

    def zipf_weights(n):
        w = 1.0 / np.arange(1, n + 1) ** zipf
        return rng.permutation(w / w.sum())

    words, unigrams = [], []
    for z in range(Z):
        vocab_z = blocks[z] + shared
        probs = (1.0 - shared_mass) * zipf_weights(vocab_per_relation)
        if shared:
            probs = np.concatenate([probs, shared_mass * zipf_weights(shared_vocab)])
        words.append(vocab_z)
        unigrams.append(probs)

    transition = np.full((Z, Z), (1.0 - peak) / (Z - 1))
    for k in range(Z):
        transition[k, (k + 1) % Z] = peak
    start = np.full(Z, 1.0 / Z)

    def dominant_block(sentence):
        counts = np.zeros(Z, dtype=int)
        for w in sentence:
            if w in owner:
                counts[owner[w]] += 1
        return int(np.argmax(counts))

    labels = synthetic_labels(Z)
    lo, hi = length_range
    documents, stripped = [], []
    for _ in range(docs):
        sentences, relations = [], []
        for t in range(sentences_per_doc):
            probs = start if t == 0 else transition[dominant_block(sentences[-1])]
            z = int(rng.choice(Z, p=probs))
            n = int(rng.integers(lo, hi + 1))
            idx = rng.choice(len(words[z]), size=n, p=unigrams[z])
            sentences.append([words[z][i] for i in idx])
            relations.append(labels[z])
        documents.append(RawDocument(sentences, relations))
        stripped.append(RawDocument([list(s) for s in sentences], [None] * len(sentences)))

    manifest = {
        "seed": seed,
        "Z": Z,
        "labels": labels,
        "vocab_per_relation": vocab_per_relation,
        "shared_vocab": shared_vocab,
        "shared_mass": shared_mass,
        "length_range": [lo, hi],
        "start_prior": start.tolist(),
        "transition": transition.tolist(),
        "words": words,
        "unigrams": [u.tolist() for u in unigrams],
    }
    return SyntheticCorpus(documents, stripped, labels, manifest)
