"""Exact and sampled inference over relations.

For the output-layer variants the words decouple the relations, so slot
posteriors and the marginal likelihood are local logsumexps.  The hidden-layer
variant couples every relation with all later sentences; there exact answers
come from enumerating the Z^T relation sequences (with shared prefixes) and the
general route is sequential Monte Carlo.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .autodiff import Tape
from .model import DRLM, RelationDistribution

MAX_ENUMERATION = 10**6


class EnumerationTooLarge(ValueError):
    pass


def _sentences(doc):
    return doc.sentences if hasattr(doc, "sentences") else doc


def joint_log_prob(model: DRLM, sentences, relations) -> float:
    tape = Tape(record=False)
    return model.document_joint_log_prob(tape, sentences, relations).item()


def sentence_log_prob(model: DRLM, tokens, c_prev: Optional[np.ndarray], z: int = 0) -> float:
    tape = Tape(record=False)
    c = None if c_prev is None else tape.constant(c_prev)
    return model.sentence_log_prob(tape, tokens, c, z).item()


def _slot_tables(model: DRLM, sentences) -> tuple[np.ndarray, np.ndarray]:
    """(T x Z log-prior, T x Z sentence log-likelihood) for Model I variants."""
    tape = Tape(record=False)
    slots = model.slot_terms(tape, sentences)
    Z = model.relations
    log_prior = np.array([s.log_prior.value[:, 0] for s in slots]).reshape(len(slots), Z)
    lik = np.array([[s.sentence[z].item() for z in range(Z)] for s in slots])
    return log_prior, lik


def relation_posterior(model: DRLM, tokens, c_prev: np.ndarray) -> RelationDistribution:
    """p(z | y_t, y_{t-1}) by Bayes' rule, in log space."""
    log_prior = np.log(model.relation_prior(c_prev).probs)
    lik = np.array([sentence_log_prob(model, tokens, c_prev, z) for z in range(model.relations)])
    scores = log_prior + lik
    return RelationDistribution(np.exp(scores - logsumexp(scores)))


def slot_posteriors(model: DRLM, doc) -> list[RelationDistribution]:
    sentences = _sentences(doc)
    if model.coupled:
        return enumerate_exact_model2(model, sentences)[1]
    log_prior, lik = _slot_tables(model, sentences)
    scores = log_prior + lik
    post = np.exp(scores - logsumexp(scores, axis=1, keepdims=True))
    return [RelationDistribution(p) for p in post]


def tag_document(model: DRLM, doc) -> list[int]:
    return [p.argmax() for p in slot_posteriors(model, doc)]


def marginal_log_likelihood(model: DRLM, doc) -> float:
    """log p(y_{1:T}) with every relation summed out; observed labels are ignored."""
    sentences = _sentences(doc)
    if model.coupled:
        return enumerate_exact_model2(model, sentences)[0]
    log_prior, lik = _slot_tables(model, sentences)
    return float(logsumexp(log_prior + lik, axis=1).sum())


# -- prefix scoring shared by enumeration and SMC ------------------------------------


class PrefixScorer:
    """log p(z_t | history) and log p(y_t | z_t, history) for a relation prefix.

    Model I terms do not depend on the prefix; Model II states are memoized
    per prefix so particles that share a history share the computation.
    """

    def __init__(self, model: DRLM, sentences):
        self.model = model
        self.sentences = sentences
        self.T = len(sentences)
        self.Z = model.relations
        self._tape = Tape(record=False)
        if model.coupled:
            self._states = {(): model.model2_initial_state(self._tape)}
            self._cache = {}
        else:
            self._log_prior, self._lik = _slot_tables(model, sentences)

    def terms(self, prefix: tuple) -> tuple[np.ndarray, np.ndarray]:
        """(log prior, sentence log-likelihood) over every z for slot len(prefix)."""
        t = len(prefix)
        if not self.model.coupled:
            return self._log_prior[t], self._lik[t]
        hit = self._cache.get(prefix)
        if hit is not None:
            return hit
        state = self._state(prefix)
        log_prior = self.model.model2_log_prior(self._tape, state.h).value[:, 0]
        lik = np.empty(self.Z)
        carry = t < self.T - 1
        for z in range(self.Z):
            ll, new_state = self.model.model2_sentence(
                self._tape, self.sentences[t], state, z, carry=carry
            )
            lik[z] = ll.item()
            if carry:
                self._states[prefix + (z,)] = new_state
        self._cache[prefix] = (log_prior, lik)
        return log_prior, lik

    def _state(self, prefix):
        if prefix not in self._states:
            self.terms(prefix[:-1])
        return self._states[prefix]


def enumerate_exact_model2(model: DRLM, sentences) -> tuple[float, list[RelationDistribution]]:
    """Sum the joint over all Z^T relation sequences.

    Returns the log marginal likelihood and per-slot posterior marginals.
    Works for every variant; it is the reference for the coupled one.
    """
    sentences = _sentences(sentences)
    Z, T = model.relations, len(sentences)
    if Z**T > MAX_ENUMERATION:
        raise EnumerationTooLarge(
            f"{Z}^{T} relation sequences exceed {MAX_ENUMERATION}; use smc_sample instead"
        )
    scorer = PrefixScorer(model, sentences)
    seqs = np.array(list(itertools.product(range(Z), repeat=T)), dtype=int).reshape(-1, T)
    log_joint = np.zeros(len(seqs))
    for i, seq in enumerate(seqs):
        for t in range(T):
            lp, lik = scorer.terms(tuple(seq[:t]))
            log_joint[i] += lp[seq[t]] + lik[seq[t]]
    total = float(logsumexp(log_joint))
    marginals = []
    for t in range(T):
        probs = np.array(
            [np.exp(logsumexp(log_joint[seqs[:, t] == z]) - total) for z in range(Z)]
        )
        marginals.append(RelationDistribution(probs / probs.sum()))
    return total, marginals


def model2_sequence_log_joints(model: DRLM, tape: Tape, sentences, dropout=None):
    """Graph nodes log p(y, z) for every relation sequence, sharing prefixes.

    Used by the conditional objective of the coupled variant.
    """
    Z, T = model.relations, len(sentences)
    if Z**T > MAX_ENUMERATION:
        raise EnumerationTooLarge(f"{Z}^{T} relation sequences exceed {MAX_ENUMERATION}")
    out = {}

    def expand(prefix, state, acc):
        if len(prefix) == T:
            out[prefix] = acc
            return
        h_prev = state.h
        if dropout is not None:
            h_prev = ad.dropout(h_prev, dropout.mask(h_prev.shape))
        log_prior = model.model2_log_prior(tape, h_prev)
        carry = len(prefix) < T - 1
        for z in range(Z):
            ll, new_state = model.model2_sentence(
                tape, sentences[len(prefix)], state, z, dropout, carry=carry
            )
            term = ad.add(ad.pick(log_prior, z), ll)
            expand(prefix + (z,), new_state, term if acc is None else ad.add(acc, term))

    expand((), model.model2_initial_state(tape), None)
    return out


# -- sequential Monte Carlo ------------------------------------------------------------


@dataclass
class ParticleSet:
    particles: np.ndarray  # N x t relation prefixes
    weights: np.ndarray  # normalized
    log_joint: np.ndarray  # log p(y_{<=t}, z_{<=t}) per particle
    log_increments: list = field(default_factory=list)
    filtering: list = field(default_factory=list)
    resampled: list = field(default_factory=list)

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))

    def __len__(self):
        return len(self.weights)


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(weights)
    positions = (rng.random() + np.arange(n)) / n
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    return np.searchsorted(cumulative, positions)


def smc_sample(
    model: DRLM,
    doc,
    N: int,
    proposal: str = "prior",
    resample_threshold: float = 0.5,
    seed: int = 0,
) -> ParticleSet:
    """Sequential importance resampling over relation sequences.

    The target after t sentences is the unnormalized prefix joint
    p(y_{<=t}, z_{<=t}), so a particle's incremental weight is
    prior(z_t) * p(y_t | z_t, history) / q(z_t).
    """
    if N < 1:
        raise ValueError("need at least one particle")
    if proposal not in ("prior", "uniform"):
        raise ValueError(f"unknown proposal {proposal!r}")
    sentences = _sentences(doc)
    rng = np.random.default_rng(seed)
    scorer = PrefixScorer(model, sentences)
    Z = scorer.Z
    ps = ParticleSet(np.zeros((N, 0), dtype=int), np.full(N, 1.0 / N), np.zeros(N))
    for t in range(len(sentences)):
        uniq, inverse = np.unique(ps.particles, axis=0, return_inverse=True)
        inverse = np.asarray(inverse).reshape(-1)
        z_new = np.empty(N, dtype=int)
        log_u = np.empty(N)
        step_joint = np.empty(N)
        for g, prefix in enumerate(uniq):
            members = np.flatnonzero(inverse == g)
            log_prior, lik = scorer.terms(tuple(int(z) for z in prefix))
            if proposal == "prior":
                log_q = log_prior
            else:
                log_q = np.full(Z, -np.log(Z))
            q = np.exp(log_q - logsumexp(log_q))
            draws = rng.choice(Z, size=len(members), p=q)
            z_new[members] = draws
            step_joint[members] = log_prior[draws] + lik[draws]
            log_u[members] = step_joint[members] - log_q[draws]
        log_w = np.log(ps.weights) + log_u
        increment = logsumexp(log_w)
        if not np.isfinite(increment):
            raise ValueError(f"slot {t}: every particle has zero weight")
        weights = np.exp(log_w - increment)
        weights /= weights.sum()
        ps.particles = np.concatenate([ps.particles, z_new[:, None]], axis=1)
        ps.log_joint = ps.log_joint + step_joint
        ps.weights = weights
        ps.log_increments.append(float(increment))
        ps.filtering.append(np.bincount(z_new, weights=weights, minlength=Z))
        resample = ps.ess < resample_threshold * N and t < len(sentences) - 1
        ps.resampled.append(bool(resample))
        if resample:
            idx = systematic_resample(weights, rng)
            ps.particles = ps.particles[idx]
            ps.log_joint = ps.log_joint[idx]
            ps.weights = np.full(N, 1.0 / N)
    return ps


def smc_log_marginal(ps: ParticleSet) -> float:
    """Product over steps of the weighted mean incremental weight, in log space.

    Equals sum_t log((1/N) sum_n u_t^n) whenever the previous step resampled;
    unbiased for p(y) in probability space.
    """
    return float(sum(ps.log_increments))


def smc_complete_log_likelihood(ps: ParticleSet) -> float:
    """Weighted average of log p(y, z^n) over particles.

    A diagnostic: it estimates an expected complete-data log-likelihood,
    which lies below the log marginal.
    """
    return float(np.dot(ps.weights, ps.log_joint))


def smc_slot_marginals(ps: ParticleSet, Z: int) -> list[np.ndarray]:
    return [np.bincount(ps.particles[:, t], weights=ps.weights, minlength=Z) for t in range(ps.particles.shape[1])]
