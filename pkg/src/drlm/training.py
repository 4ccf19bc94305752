"""Objectives, initialization, AdaGrad with norm clipping, and the epoch loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .inference import marginal_log_likelihood, model2_sequence_log_joints, tag_document
from .metrics import accuracy, perplexity
from .model import DRLM, ModelDims, param_shapes
from .recurrent import MaskSampler

log = logging.getLogger(__name__)

GRID = (32, 48, 64, 96, 128)


@dataclass
class TrainConfig:
    objective: str = "joint"
    learning_rate: float = 0.1
    clip: float = 5.0
    dropout: float = 0.5
    epochs: int = 5
    seed: int = 0
    include_dummy: bool = True
    dummy_label: int = 0
    epsilon: float = 1e-8
    grid: tuple = GRID

    def __post_init__(self):
        if self.objective not in ("joint", "conditional"):
            raise ValueError(f"objective must be joint or conditional, got {self.objective!r}")
        if self.learning_rate <= 0 or self.clip <= 0:
            raise ValueError("learning rate and clip threshold must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")


def init_params(dims: ModelDims, seed: int = 0, variant: str = "drlm") -> DRLM:
    """Uniform in +-sqrt(6 / (rows + cols)) per array; U in +-1e-5; b and c_0 zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, (rows, cols) in param_shapes(dims, variant).items():
        if name == "U":
            params[name] = rng.uniform(-1e-5, 1e-5, (rows, cols))
        elif name in ("b", "c_0"):
            params[name] = np.zeros((rows, cols))
        else:
            bound = math.sqrt(6.0 / (rows + cols))
            params[name] = rng.uniform(-bound, bound, (rows, cols))
    return DRLM(dims, variant, params)


# -- objectives (returned as losses, i.e. negated log-likelihoods) ---------------------


def joint_objective(model: DRLM, tape: Tape, doc, dropout: Optional[MaskSampler] = None) -> Node:
    """-log p(y_{1:T}, z_{1:T})."""
    return ad.scale(model.document_joint_log_prob(tape, doc.sentences, doc.relations, dropout), -1.0)


def conditional_objective(
    model: DRLM,
    tape: Tape,
    doc,
    dropout: Optional[MaskSampler] = None,
    include_dummy: bool = True,
    dummy_label: int = 0,
) -> Node:
    """-log p(z_{1:T} | y_{1:T}).

    For the output-layer model this is the sum over slots of the log
    posterior of the observed label; slots carrying ``dummy_label`` are
    skipped when ``include_dummy`` is false.  The coupled variant normalizes
    over all Z^T relation sequences.
    """
    if model.relations == 1 and model.variant in ("rnnlm", "dclm"):
        raise ValueError(f"{model.variant} has no relation variable to condition on")
    if any(z is None for z in doc.relations):
        raise ValueError("conditional objective needs every slot labeled")
    if model.coupled:
        joints = model2_sequence_log_joints(model, tape, doc.sentences, dropout)
        keys = list(joints)
        scores = ad.concat([joints[k] for k in keys], axis=0)
        target = keys.index(tuple(doc.relations))
        return ad.scale(ad.pick_log_prob(scores, target), -1.0)
    terms = []
    for slot, z in zip(model.slot_terms(tape, doc.sentences, None, dropout), doc.relations):
        if not include_dummy and z == dummy_label:
            continue
        lik = ad.concat([slot.sentence[k] for k in range(model.relations)], axis=0)
        scores = ad.add(slot.log_prior, lik)
        terms.append(ad.pick_log_prob(scores, z))
    if not terms:
        return tape.constant(np.zeros((1, 1)))
    return ad.scale(ad.total(ad.concat(terms, axis=1)), -1.0)


def objective(model, tape, doc, config: TrainConfig, dropout=None) -> Node:
    if config.objective == "joint":
        return joint_objective(model, tape, doc, dropout)
    return conditional_objective(model, tape, doc, dropout, config.include_dummy, config.dummy_label)


# -- optimization ----------------------------------------------------------------------


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: dict, tau: float) -> dict:
    norm = global_norm(grads)
    if norm <= tau:
        return grads
    factor = tau / norm
    return {name: g * factor for name, g in grads.items()}


@dataclass
class AdagradState:
    accumulators: dict
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict, epsilon: float = 1e-8) -> "AdagradState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, epsilon)


def adagrad_step(params: dict, grads: dict, state: AdagradState, lr: float) -> dict:
    """In-place update ``p -= lr * g / (sqrt(sum g^2) + eps)``; returns ``params``."""
    for name, g in grads.items():
        acc = state.accumulators[name]
        acc += g * g
        params[name] -= lr * g / (np.sqrt(acc) + state.epsilon)
    return params


# -- evaluation ------------------------------------------------------------------------


def token_count(docs) -> int:
    return sum(len(s) for doc in docs for s in doc.sentences)


def corpus_log_likelihood(model: DRLM, docs) -> float:
    return math.fsum(marginal_log_likelihood(model, doc) for doc in docs)


def evaluate_perplexity(model: DRLM, docs) -> float:
    return perplexity(corpus_log_likelihood(model, docs), token_count(docs))


def scored_slots(docs, include_dummy=True, dummy_label=0):
    """(gold, predicted-position) pairs eligible for scoring."""
    for doc in docs:
        for t, z in enumerate(doc.relations):
            if z is None or (not include_dummy and z == dummy_label):
                continue
            yield doc, t, z


def evaluate_tagging(model: DRLM, docs, include_dummy=True, dummy_label=0) -> tuple[list, list]:
    gold, pred = [], []
    cache = {}
    for doc, t, z in scored_slots(docs, include_dummy, dummy_label):
        if id(doc) not in cache:
            cache[id(doc)] = tag_document(model, doc)
        gold.append(z)
        pred.append(cache[id(doc)][t])
    return gold, pred


def evaluate_accuracy(model: DRLM, docs, include_dummy=True, dummy_label=0) -> float:
    gold, pred = evaluate_tagging(model, docs, include_dummy, dummy_label)
    return accuracy(gold, pred)


@dataclass
class EpochRecord:
    epoch: int
    objective: float
    dev_metric: float
    seconds: float

    def line(self, metric_name: str) -> str:
        return (
            f"epoch={self.epoch} objective={self.objective:.6f} "
            f"dev_{metric_name}={self.dev_metric:.6f} time={self.seconds:.2f}"
        )


@dataclass
class FitResult:
    model: DRLM
    history: list = field(default_factory=list)
    best_epoch: int = 0
    metric: str = "perplexity"


def fit(
    model: DRLM,
    train: Sequence,
    dev: Sequence,
    config: TrainConfig,
    on_epoch: Optional[Callable[[str], None]] = None,
) -> FitResult:
    """Online AdaGrad over shuffled documents; keeps the best dev epoch.

    Dev perplexity (lower is better) selects joint-trained models and dev
    tagging accuracy (higher is better) conditional ones.  ``history[0]`` is
    the untrained model's dev metric.
    """
    if not train or not dev:
        raise ValueError("training and development corpora must be non-empty")
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    dropout = MaskSampler(config.dropout, rng) if config.dropout > 0 else None
    state = AdagradState.zeros_like(model.params, config.epsilon)
    by_ppl = config.objective == "joint"
    metric_name = "perplexity" if by_ppl else "accuracy"

    def dev_metric():
        if by_ppl:
            return evaluate_perplexity(model, dev)
        return evaluate_accuracy(model, dev, config.include_dummy, config.dummy_label)

    result = FitResult(model.copy(), [EpochRecord(0, float("nan"), dev_metric(), 0.0)], 0, metric_name)
    best = None
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        total = 0.0
        for i in rng.permutation(len(train)):
            tape = Tape()
            loss = objective(model, tape, train[i], config, dropout)
            grads = tape.backward(loss)
            grads = clip_gradients(grads, config.clip)
            adagrad_step(model.params, grads, state, config.learning_rate)
            total += loss.item()
        record = EpochRecord(epoch, total / len(train), dev_metric(), time.perf_counter() - start)
        result.history.append(record)
        line = record.line(metric_name)
        log.info(line)
        if on_epoch is not None:
            on_epoch(line)
        score = -record.dev_metric if by_ppl else record.dev_metric
        if best is None or score > best:
            best = score
            result.model = model.copy()
            result.best_epoch = epoch
    return result
