"""Universal lexical representation.

Every token of every language is embedded as a convex mixture over a shared
bank of universal slots.  The mixture weight of slot i for token x is a
temperature-softmax of the key/query match score

    score_i(x) = eps_key[i]^T A eps_query[x]

and the token embedding is  sum_i alpha_i * eps_u[i]  plus a per-language
additive correction delta[x] that starts at zero and is the only embedding
quantity updated during language-specific fine-tuning.

The trainable mixture parameters (the universal slot matrix and the bilinear
transform A) live in the shared named parameter set under ``ulr.eps_u`` and
``ulr.A`` so that outer-loop updates treat them like any other weight; this
module owns the frozen pieces (key matrix, per-language query matrices) and
the stage/freeze bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

EPS_U = "ulr.eps_u"
TRANSFORM = "ulr.A"

STAGE_META = "meta"
STAGE_LANGUAGE_SPECIFIC = "language_specific"


class UlrError(ValueError):
    pass


@dataclass
class UlrState:
    """Shared pieces of the universal representation.

    eps_key is frozen always.  tau > 0 is the softmax temperature.  sign=+1
    gives similar key/query pairs high weight (the retrieval reading);
    sign=-1 keeps the literal negated exponent.
    """

    eps_key: np.ndarray          # (M, d), frozen
    tau: float = 0.05
    sign: float = 1.0
    stage: str = STAGE_META

    def __post_init__(self):
        self.eps_key = np.asarray(self.eps_key, dtype=np.float64)
        if self.eps_key.ndim != 2 or min(self.eps_key.shape) < 1:
            raise UlrError(f"eps_key must be a nonempty M x d matrix, got {self.eps_key.shape}")
        if self.tau <= 0:
            raise UlrError("tau must be positive")
        if self.sign not in (1.0, -1.0):
            raise UlrError("sign must be +1 or -1")

    @property
    def n_slots(self) -> int:
        return self.eps_key.shape[0]

    @property
    def dim(self) -> int:
        return self.eps_key.shape[1]


@dataclass
class LanguageLexicon:
    """Per-language embedding state: frozen query matrix + trainable deltas."""

    query: np.ndarray                    # (|V|, d), pretrained, never updated
    delta: Tensor = field(default=None)  # (|V|, d), zero-initialized
    delta_trainable: bool = False

    def __post_init__(self):
        self.query = np.asarray(self.query, dtype=np.float64)
        if self.query.ndim != 2:
            raise UlrError(f"query must be |V| x d, got {self.query.shape}")
        if self.delta is None:
            self.delta = Tensor(np.zeros_like(self.query))
        if self.delta.shape != self.query.shape:
            raise UlrError(
                f"delta shape {self.delta.shape} does not match query {self.query.shape}"
            )

    @property
    def vocab_size(self) -> int:
        return self.query.shape[0]

    def clone(self) -> "LanguageLexicon":
        return LanguageLexicon(
            self.query,
            Tensor(self.delta.data.copy(), requires_grad=self.delta_trainable),
            self.delta_trainable,
        )

    def reset_delta(self) -> None:
        self.delta = Tensor(np.zeros_like(self.query), requires_grad=self.delta_trainable)


def init_ulr_params(pivot_query: np.ndarray, n_slots: int) -> tuple[UlrState, dict[str, Tensor]]:
    """Build the shared state and the trainable entries from a pivot language.

    Both the slot bank and the key matrix start as the first `n_slots` query
    vectors of the designated pivot language; the key copy stays frozen, the
    slot copy trains during the outer stage along with A (initialized to
    identity so initial scores are plain dot products).
    """
    pivot_query = np.asarray(pivot_query, dtype=np.float64)
    if n_slots < 1 or n_slots > pivot_query.shape[0]:
        raise UlrError(
            f"n_slots must be in [1, {pivot_query.shape[0]}], got {n_slots}"
        )
    d = pivot_query.shape[1]
    state = UlrState(eps_key=pivot_query[:n_slots].copy())
    entries = {
        EPS_U: Tensor(pivot_query[:n_slots].copy(), requires_grad=True),
        TRANSFORM: Tensor(np.eye(d), requires_grad=True),
    }
    return state, entries


# ---------------------------------------------------------------------------
# mixture computation


def _score_matrix(ulr: UlrState, params: Mapping[str, Tensor], query: np.ndarray) -> Tensor:
    # (|V|, M): row x holds sign/tau * q_x^T A^T k_i for every slot i
    a = params[TRANSFORM]
    scores = ad.matmul(ad.matmul(Tensor(query), ad.transpose(a)), Tensor(ulr.eps_key.T))
    return ad.scale(scores, ulr.sign / ulr.tau)


def mixture_matrix(ulr: UlrState, params: Mapping[str, Tensor], lexicon: LanguageLexicon) -> Tensor:
    """All mixture weights at once: (|V|, M), rows summing to one."""
    return ad.softmax(_score_matrix(ulr, params, lexicon.query), axis=-1)


def mixture_weights(
    ulr: UlrState, params: Mapping[str, Tensor], lexicon: LanguageLexicon, token_id: int
) -> Tensor:
    """Length-M weight vector for one token."""
    if not 0 <= token_id < lexicon.vocab_size:
        raise UlrError(f"token_id {token_id} out of range [0, {lexicon.vocab_size})")
    return ad.softmax(_score_matrix(ulr, params, lexicon.query[token_id : token_id + 1]), axis=-1)[0]


def embedding_table(ulr: UlrState, params: Mapping[str, Tensor], lexicon: LanguageLexicon) -> Tensor:
    """Full language embedding matrix: mixture over slots plus deltas, (|V|, d)."""
    alpha = mixture_matrix(ulr, params, lexicon)
    return ad.add(ad.matmul(alpha, params[EPS_U]), lexicon.delta)


def embed(
    ulr: UlrState, params: Mapping[str, Tensor], lexicon: LanguageLexicon, token_id: int
) -> Tensor:
    """Embedding of one token: convex sum of slots translated by its delta."""
    alpha = mixture_weights(ulr, params, lexicon, token_id)
    mix = ad.matmul(alpha.reshape(1, -1), params[EPS_U])[0]
    return ad.add(mix, lexicon.delta[token_id])


# ---------------------------------------------------------------------------
# stage / freeze semantics


def set_stage(ulr: UlrState, lexicons: Iterable[LanguageLexicon], stage: str,
              active: LanguageLexicon | None = None) -> dict:
    """Flip trainability between the outer and language-specific stages.

    meta: the slot bank and A train, every delta is frozen.
    language_specific: only the active language's delta trains; the slot
    bank, A, keys and queries are all frozen.

    Returns the resulting assignment for inspection.
    """
    if stage not in (STAGE_META, STAGE_LANGUAGE_SPECIFIC):
        raise UlrError(f"unknown stage '{stage}'")
    ulr.stage = stage
    lexicons = list(lexicons)
    for lex in lexicons:
        trainable = stage == STAGE_LANGUAGE_SPECIFIC and (active is None or lex is active)
        lex.delta_trainable = trainable
        lex.delta = Tensor(lex.delta.data, requires_grad=trainable)
    return {
        "stage": stage,
        "shared_trainable": (EPS_U, TRANSFORM) if stage == STAGE_META else (),
        "delta_trainable": [lex.delta_trainable for lex in lexicons],
    }


# ---------------------------------------------------------------------------
# embedding file format: first line "count dim", then "token v1 ... vdim"


def save_embeddings(path, tokens: list[str], vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors, dtype=np.float64)
    if len(tokens) != vectors.shape[0]:
        raise UlrError("token count does not match vector count")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(tokens)} {vectors.shape[1]}\n")
        for tok, vec in zip(tokens, vectors):
            fh.write(tok + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def load_embeddings(path) -> tuple[list[str], np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise UlrError(f"{path}: malformed header {header!r}")
        count, dim = int(header[0]), int(header[1])
        tokens, rows = [], []
        for line_no, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(" ")
            if len(parts) != dim + 1:
                raise UlrError(f"{path}:{line_no}: expected token + {dim} floats")
            tokens.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
    if len(tokens) != count:
        raise UlrError(f"{path}: header promised {count} rows, found {len(tokens)}")
    return tokens, np.asarray(rows, dtype=np.float64)
