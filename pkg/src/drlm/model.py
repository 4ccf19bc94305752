"""Discourse relation language model and its degenerate baselines.

One class covers four variants:

``rnnlm``
    softmax(W_o h + b_o) per token, no inter-sentence context.
``dclm``
    softmax(W_o h + W_c c + b_o), where c is the last hidden state of the
    previous sentence (or the learned default context for the first one).
``drlm``
    a relation z_t is drawn from softmax(U c + b) for every sentence and the
    output layer becomes softmax(W_o V_z h + W_c M_z c + b_o^z).
``drlm-model2``
    z_t instead indexes the hidden transition: every LSTM step of sentence t
    sees Wtrans_z @ h in place of h, and the recurrent state is carried
    across sentence boundaries so z_t influences all later sentences.

All graph-building methods take a :class:`~drlm.autodiff.Tape` and return
nodes; float-valued conveniences live in :mod:`drlm.inference`.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .corpus import BOS_ID
from .recurrent import MaskSampler, RecurrentState, lstm_step, run_sentence, zero_state

VARIANTS = ("rnnlm", "dclm", "drlm", "drlm-model2")
MAGIC = b"DRLM1"


@dataclass(frozen=True)
class ModelDims:
    V: int
    K: int
    H: int
    Z: int = 1

    def __post_init__(self):
        for field in ("V", "K", "H", "Z"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive, got {getattr(self, field)}")


@dataclass
class RelationDistribution:
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float).reshape(-1)
        if (self.probs < 0).any() or abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"not a probability vector: {self.probs}")

    def argmax(self) -> int:
        # np.argmax returns the first maximum, i.e. ties go to the lowest label
        return int(np.argmax(self.probs))


def param_shapes(dims: ModelDims, variant: str) -> dict[str, tuple[int, int]]:
    """Names and shapes of every trainable array, in checkpoint order."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    V, K, H, Z = dims.V, dims.K, dims.H, dims.Z
    shapes = {
        "X": (K, V),
        "lstm.Wx": (4 * H, K),
        "lstm.Wh": (4 * H, H),
        "lstm.b": (4 * H, 1),
        "W_o": (V, H),
    }
    if variant in ("dclm", "drlm"):
        shapes["W_c"] = (V, H)
    if variant == "drlm":
        for i in range(Z):
            shapes[f"V_z.{i}"] = (H, H)
        for i in range(Z):
            shapes[f"M_z.{i}"] = (H, H)
    n_bias = Z if variant == "drlm" else 1
    for i in range(n_bias):
        shapes[f"b_o.{i}"] = (V, 1)
    if variant in ("drlm", "drlm-model2"):
        shapes["U"] = (Z, H)
        shapes["b"] = (Z, 1)
    if variant != "rnnlm":
        shapes["c_0"] = (H, 1)
    if variant == "drlm-model2":
        for i in range(Z):
            shapes[f"Wtrans.{i}"] = (H, H)
    return shapes


def tied_param_count(dims: ModelDims) -> int:
    """Output layer, relation prior and default context with factored matrices."""
    V, H, Z = dims.V, dims.H, dims.Z
    return 2 * V * H + Z * (2 * H * H + V) + Z * H + Z + H


def untied_param_count(dims: ModelDims) -> int:
    V, H, Z = dims.V, dims.H, dims.Z
    return 2 * Z * V * H + Z * V


@dataclass
class SentenceEncoding:
    predictors: Node  # H x M, column n predicts token n
    context: Node  # H x 1, hidden state after the last token


@dataclass
class SlotTerms:
    """Per-slot pieces of the Model I factorization."""

    log_prior: Node  # Z x 1
    sentence: dict  # relation -> scalar log p(y_t | z, y_{t-1})


class DRLM:
    def __init__(self, dims: ModelDims, variant: str = "drlm", params: Optional[dict] = None):
        self.dims = dims
        self.variant = variant
        shapes = param_shapes(dims, variant)
        if params is None:
            params = {name: np.zeros(shape) for name, shape in shapes.items()}
        missing = set(shapes) - set(params)
        extra = set(params) - set(shapes)
        if missing or extra:
            raise ValueError(f"parameter names mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.params = {name: np.asarray(params[name], dtype=np.float64) for name in shapes}

    # -- structure -------------------------------------------------------------

    @property
    def relations(self) -> int:
        """Number of relation values the model distinguishes (1 for baselines)."""
        return self.dims.Z if self.variant in ("drlm", "drlm-model2") else 1

    @property
    def uses_context(self) -> bool:
        return self.variant in ("dclm", "drlm")

    @property
    def coupled(self) -> bool:
        return self.variant == "drlm-model2"

    def copy(self) -> "DRLM":
        return DRLM(self.dims, self.variant, {k: v.copy() for k, v in self.params.items()})

    def _p(self, tape: Tape, name: str) -> Node:
        return tape.param(name, self.params[name])

    def _check_relation(self, z: int):
        if not 0 <= z < self.relations:
            raise IndexError(f"relation {z} outside [0, {self.relations})")

    # -- Model I building blocks --------------------------------------------------

    def default_context(self, tape: Tape) -> Node:
        return self._p(tape, "c_0")

    def relation_log_prior(self, tape: Tape, c_prev: Optional[Node]) -> Node:
        """log softmax(U c + b); a constant [0] for the single-relation baselines."""
        if self.variant in ("rnnlm", "dclm"):
            return tape.constant(np.zeros((1, 1)))
        logits = ad.add(ad.matmul(self._p(tape, "U"), c_prev), self._p(tape, "b"))
        return ad.log_softmax(logits)

    def relation_prior(self, c_prev: np.ndarray) -> RelationDistribution:
        tape = Tape(record=False)
        log_p = self.relation_log_prior(tape, tape.constant(c_prev))
        return RelationDistribution(np.exp(log_p.value))

    def tied_output_matrices(self, z: int) -> tuple[np.ndarray, np.ndarray]:
        """Materialized W_o V_z and W_c M_z.  Reference only: the scoring path
        applies the factors lazily and never forms these V x H products."""
        self._check_relation(z)
        p = self.params
        return p["W_o"] @ p[f"V_z.{z}"], p["W_c"] @ p[f"M_z.{z}"]

    def output_logits(self, tape: Tape, hs: Node, c_prev: Optional[Node], z: int = 0) -> Node:
        """V x M unnormalized scores for M hidden-state columns."""
        self._check_relation(z)
        W_o = self._p(tape, "W_o")
        if self.variant == "drlm":
            intra = ad.matmul(W_o, ad.matmul(self._p(tape, f"V_z.{z}"), hs))
            inter = ad.matmul(self._p(tape, "W_c"), ad.matmul(self._p(tape, f"M_z.{z}"), c_prev))
            shift = ad.add(inter, self._p(tape, f"b_o.{z}"))
        else:
            intra = ad.matmul(W_o, hs)
            shift = self._p(tape, "b_o.0")
            if self.variant == "dclm":
                shift = ad.add(ad.matmul(self._p(tape, "W_c"), c_prev), shift)
        return ad.add(intra, shift)

    def token_log_probs(self, tape: Tape, h: Node, c_prev: Optional[Node], z: int = 0) -> Node:
        return ad.log_softmax(self.output_logits(tape, h, c_prev, z))

    def encode_sentence(
        self,
        tape: Tape,
        tokens: Sequence[int],
        dropout: Optional[MaskSampler] = None,
        initial: Optional[RecurrentState] = None,
        transition: Optional[Node] = None,
        carry: bool = True,
    ) -> tuple[SentenceEncoding, Optional[RecurrentState]]:
        """Run the LSTM over ``<s> tokens``.

        Column n of ``predictors`` is the state before token n (the first is
        the state after ``<s>``); ``context`` is the state after the last
        token.  With ``carry=False`` the last token is not consumed and no
        context or final state is produced, for sentences nothing follows.
        Dropout on the predictors is applied here; dropout on the context is
        applied by whoever consumes it.
        """
        if len(tokens) == 0:
            raise ValueError("empty sentence")
        if initial is None:
            initial = zero_state(tape, self.dims.H)
        feed = [BOS_ID, *tokens] if carry else [BOS_ID, *tokens[:-1]]
        hiddens, final = run_sentence(tape, self.params, feed, initial, dropout, transition)
        hs = ad.columns(hiddens, 0, len(tokens)) if carry else hiddens
        if dropout is not None:
            hs = ad.dropout(hs, dropout.mask(hs.shape))
        if not carry:
            return SentenceEncoding(hs, None), None
        return SentenceEncoding(hs, final.h), final

    def score_encoded(self, tape: Tape, enc: SentenceEncoding, tokens, c_prev, z: int = 0) -> Node:
        logits = self.output_logits(tape, enc.predictors, c_prev, z)
        return ad.total(ad.pick_log_prob(logits, list(tokens)))

    def sentence_log_prob(
        self,
        tape: Tape,
        tokens: Sequence[int],
        c_prev: Optional[Node],
        z: int = 0,
        dropout: Optional[MaskSampler] = None,
    ) -> Node:
        enc, _ = self.encode_sentence(tape, tokens, dropout, carry=False)
        return self.score_encoded(tape, enc, tokens, c_prev, z)

    def slot_terms(
        self,
        tape: Tape,
        sentences: Sequence[Sequence[int]],
        relations: Optional[Sequence[Optional[int]]] = None,
        dropout: Optional[MaskSampler] = None,
    ) -> list[SlotTerms]:
        """Prior and sentence log-likelihood terms for every slot.

        ``relations[t]`` restricts slot t to one relation; ``None`` (or no
        list) scores every relation, which is what inference needs.
        """
        if self.coupled:
            raise ValueError("slot_terms factorizes only the output-layer variants")
        out = []
        c_prev = self.default_context(tape) if self.uses_context else None
        for t, tokens in enumerate(sentences):
            c_used = c_prev
            if c_used is not None and dropout is not None:
                c_used = ad.dropout(c_used, dropout.mask(c_used.shape))
            last = t == len(sentences) - 1
            enc, _ = self.encode_sentence(tape, tokens, dropout, carry=not last)
            log_prior = self.relation_log_prior(tape, c_used)
            wanted = None if relations is None else relations[t]
            zs = range(self.relations) if wanted is None else [wanted if self.relations > 1 else 0]
            sentence = {z: self.score_encoded(tape, enc, tokens, c_used, z) for z in zs}
            out.append(SlotTerms(log_prior, sentence))
            if c_prev is not None and not last:
                c_prev = enc.context
        return out

    # -- Model II -------------------------------------------------------------------

    def model2_initial_state(self, tape: Tape) -> RecurrentState:
        return RecurrentState(self.default_context(tape), tape.constant(np.zeros((self.dims.H, 1))))

    def model2_step(self, tape: Tape, x: Node, state: RecurrentState, z: int) -> RecurrentState:
        self._check_relation(z)
        return lstm_step(tape, self.params, x, state, self._p(tape, f"Wtrans.{z}"))

    def model2_log_prior(self, tape: Tape, h_prev: Node) -> Node:
        logits = ad.add(ad.matmul(self._p(tape, "U"), h_prev), self._p(tape, "b"))
        return ad.log_softmax(logits)

    def model2_sentence(
        self,
        tape: Tape,
        tokens: Sequence[int],
        state: RecurrentState,
        z: int,
        dropout: Optional[MaskSampler] = None,
        carry: bool = True,
    ) -> tuple[Node, Optional[RecurrentState]]:
        """log p(y_t | z_t, history) and the carried state after sentence t
        (None when ``carry`` is false)."""
        self._check_relation(z)
        enc, final = self.encode_sentence(
            tape, tokens, dropout, initial=state, transition=self._p(tape, f"Wtrans.{z}"), carry=carry
        )
        return self.score_encoded(tape, enc, tokens, None, 0), final

    # -- whole documents --------------------------------------------------------------

    def document_joint_log_prob(
        self,
        tape: Tape,
        sentences: Sequence[Sequence[int]],
        relations: Sequence[Optional[int]],
        dropout: Optional[MaskSampler] = None,
    ) -> Node:
        """log p(y_{1:T}, z_{1:T}) with every relation observed.

        Baselines have no relation variable and ignore ``relations``.
        """
        if self.relations > 1 and any(z is None for z in relations):
            missing = [t for t, z in enumerate(relations) if z is None]
            raise ValueError(f"unlabeled slots {missing}; marginalize with drlm.inference instead")
        if self.relations == 1:
            relations = [0] * len(sentences)
        terms = []
        if self.coupled:
            state = self.model2_initial_state(tape)
            for t, (tokens, z) in enumerate(zip(sentences, relations)):
                h_prev = state.h
                if dropout is not None:
                    h_prev = ad.dropout(h_prev, dropout.mask(h_prev.shape))
                terms.append(ad.pick(self.model2_log_prior(tape, h_prev), z))
                last = t == len(sentences) - 1
                ll, state = self.model2_sentence(tape, tokens, state, z, dropout, carry=not last)
                terms.append(ll)
        else:
            for slot, z in zip(self.slot_terms(tape, sentences, relations, dropout), relations):
                z = z if self.relations > 1 else 0
                terms.append(ad.pick(slot.log_prior, z))
                terms.append(slot.sentence[z])
        return ad.total(ad.concat(terms, axis=0))


# -- checkpoint format ---------------------------------------------------------------


def save_checkpoint(model: DRLM, path) -> None:
    """``DRLM1`` magic, dims (V, K, H, Z) and variant tag, then named float64 tensors."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    d = model.dims
    buf.write(struct.pack("<IIII", d.V, d.K, d.H, d.Z))
    tag = model.variant.encode("ascii")
    buf.write(struct.pack("<B", len(tag)))
    buf.write(tag)
    for name in param_shapes(model.dims, model.variant):
        value = model.params[name]
        raw = name.encode("ascii")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<II", *value.shape))
        buf.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> DRLM:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: missing DRLM1 magic")
    try:
        dims, variant, params = _parse_checkpoint(data)
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt ({exc})") from exc
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    try:
        return DRLM(dims, variant, params)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc


def _parse_checkpoint(data: bytes):
    pos = len(MAGIC)
    V, K, H, Z = struct.unpack_from("<IIII", data, pos)
    pos += 16
    (n,) = struct.unpack_from("<B", data, pos)
    pos += 1
    variant = data[pos : pos + n].decode("ascii")
    pos += n
    params = {}
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("ascii")
        pos += n
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        count = rows * cols
        if pos + 8 * count > len(data):
            raise CheckpointError(f"tensor {name} truncated")
        params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(rows, cols).copy()
        pos += 8 * count
    try:
        dims = ModelDims(V, K, H, Z)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    return dims, variant, params
