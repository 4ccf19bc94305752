"""Word embeddings and a single-layer LSTM built on the autodiff tape.

Parameter arrays live in a plain ``dict[str, ndarray]`` under the names
``X`` (K x V), ``lstm.Wx`` (4H x K), ``lstm.Wh`` (4H x H) and ``lstm.b``
(4H x 1).  Gate blocks are stacked in the order input, forget, output,
candidate.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape


@dataclass
class RecurrentState:
    h: Node
    c_mem: Node


def zero_state(tape: Tape, hidden: int) -> RecurrentState:
    zeros = np.zeros((hidden, 1))
    return RecurrentState(tape.constant(zeros), tape.constant(zeros))


class MaskSampler:
    """Inverted-dropout masks: entries are 0 or 1/keep, so evaluation needs no rescaling."""

    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def mask(self, shape) -> Optional[np.ndarray]:
        if self.rate == 0.0:
            return None
        keep = 1.0 - self.rate
        return (self.rng.random(shape) < keep) / keep


def _mask(dropout: Optional[MaskSampler], shape):
    return None if dropout is None else dropout.mask(shape)


def embed(tape: Tape, params: dict, token_id: int) -> Node:
    vocab = params["X"].shape[1]
    if not 0 <= token_id < vocab:
        raise IndexError(f"token id {token_id} outside vocabulary of size {vocab}")
    return ad.lookup(tape.param("X", params["X"]), [token_id])


def _stack(state: RecurrentState) -> Node:
    return ad.concat([state.h, state.c_mem], axis=0)


def _unstack(both: Node, hidden: int) -> RecurrentState:
    return RecurrentState(ad.rows(both, 0, hidden), ad.rows(both, hidden, 2 * hidden))


def _recurrent_matrix(tape, params, transition):
    Wh = tape.param("lstm.Wh", params["lstm.Wh"])
    return Wh if transition is None else ad.matmul(Wh, transition)


def lstm_step(
    tape: Tape,
    params: dict,
    x: Node,
    state: RecurrentState,
    transition: Optional[Node] = None,
) -> RecurrentState:
    """One LSTM update.  ``transition`` (H x H) replaces h by ``transition @ h``
    before it enters the gates; that is the relation-indexed transition of the
    hidden-layer model variant."""
    pre = ad.add(
        ad.matmul(tape.param("lstm.Wx", params["lstm.Wx"]), x),
        tape.param("lstm.b", params["lstm.b"]),
    )
    rec = ad.matmul(_recurrent_matrix(tape, params, transition), state.h)
    return _unstack(ad.lstm_cell(pre, rec, _stack(state)), state.h.shape[0])


def run_sentence(
    tape: Tape,
    params: dict,
    tokens: Sequence[int],
    initial: RecurrentState,
    dropout: Optional[MaskSampler] = None,
    transition: Optional[Node] = None,
) -> tuple[Node, RecurrentState]:
    """Consume ``tokens`` left to right.

    Returns an H x n matrix whose column n is the hidden state after token n,
    and the final state.  The input projection of all tokens is one matmul;
    the recurrence carries the stacked [h; c_mem] so each step is three
    graph operations.  ``dropout`` masks the embedded inputs, one fresh mask
    column per position.
    """
    if len(tokens) == 0:
        raise ValueError("run_sentence needs at least one token")
    hidden = initial.h.shape[0]
    table = tape.param("X", params["X"])
    emb = ad.lookup(table, tokens)
    emb = ad.dropout(emb, _mask(dropout, emb.shape))
    pre = ad.add(
        ad.matmul(tape.param("lstm.Wx", params["lstm.Wx"]), emb),
        tape.param("lstm.b", params["lstm.b"]),
    )
    # [W | 0] so the stacked state can feed the gates without slicing out h
    rec_w = ad.concat(
        [_recurrent_matrix(tape, params, transition), tape.constant(np.zeros((4 * hidden, hidden)))],
        axis=1,
    )
    both = _stack(initial)
    states = []
    for n in range(len(tokens)):
        both = ad.lstm_cell(ad.column(pre, n), ad.matmul(rec_w, both), both)
        states.append(both)
    hiddens = ad.rows(ad.concat(states, axis=1), 0, hidden)
    return hiddens, _unstack(both, hidden)
