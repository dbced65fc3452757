"""Scaled-down Transformer encoder-decoder for token-level translation.

The encoder consumes source embeddings produced by the universal lexical
representation; the decoder owns an ordinary embedding table for the shared
target language plus a separate (untied) output projection.  Residual blocks
are post-norm and positions are sinusoidal.  All likelihoods are per-token
negative mean log-probabilities so batches of different sizes are comparable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import ulr as ulr_mod
from .autodiff import Tensor

BOS, EOS, PAD, UNK = 0, 1, 2, 3
RESERVED = ["<bos>", "<eos>", "<pad>", "<unk>"]

PARTITIONS = ("embedding", "encoder", "decoder")

NEG_INF = -1e9


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layer: int = 2
    n_head: int = 2
    d_ff: int = 128
    max_len: int = 64
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_head != 0:
            raise ModelError(
                f"d_model ({self.d_model}) must be divisible by n_head ({self.n_head})"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must lie in [0, 1)")


class Vocabulary:
    """Token <-> id bijection with fixed reserved ids 0..3."""

    def __init__(self, corpus_tokens: Sequence[str]):
        uniq = sorted(set(corpus_tokens))
        for r in RESERVED:
            if r in uniq:
                raise ModelError(f"corpus token collides with reserved token {r!r}")
        self.tokens = RESERVED + uniq
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


class ParamSet(Mapping):
    """Named flat collection of tensors with module partition labels."""

    def __init__(self, entries: dict[str, Tensor], partitions: dict[str, str]):
        if set(entries) != set(partitions):
            raise ModelError("entries and partition labels must cover the same names")
        bad = {n: p for n, p in partitions.items() if p not in PARTITIONS}
        if bad:
            raise ModelError(f"unknown partition labels: {bad}")
        self.entries = dict(entries)
        self.partitions = dict(partitions)

    # Mapping protocol -------------------------------------------------------

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    # vector-space helpers ---------------------------------------------------

    def clone(self) -> "ParamSet":
        return ParamSet(
            {n: Tensor(t.data.copy(), requires_grad=True) for n, t in self.entries.items()},
            self.partitions,
        )

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParamSet":
        """New set with some entries swapped for fresh leaves; others shared."""
        entries = dict(self.entries)
        for n, arr in updates.items():
            if n not in entries:
                raise ModelError(f"unknown parameter name {n!r}")
            if np.shape(arr) != entries[n].shape:
                raise ModelError(f"shape mismatch for {n!r}")
            entries[n] = Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)
        return ParamSet(entries, self.partitions)

    def axpy(self, alpha: float, direction: Mapping[str, np.ndarray],
             names: set[str] | None = None) -> "ParamSet":
        """theta + alpha * direction on `names` (all by default)."""
        names = set(self.entries) if names is None else names
        updates = {}
        for n in names:
            d = direction[n]
            d = d.data if isinstance(d, Tensor) else np.asarray(d)
            updates[n] = self.entries[n].data + alpha * d
        return self.replace(updates)

    def distance_to(self, other: "ParamSet", names: set[str] | None = None) -> float:
        names = set(self.entries) if names is None else names
        return math.sqrt(
            sum(float(np.sum((self[n].data - other[n].data) ** 2)) for n in names)
        )

    def n_parameters(self) -> int:
        return sum(t.size for t in self.entries.values())


def partition_mask(params: ParamSet, strategy: str) -> set[str]:
    """Trainable-name set for a fine-tuning strategy."""
    if strategy == "all":
        keep = set(PARTITIONS)
    elif strategy == "emb+enc":
        keep = {"embedding", "encoder"}
    elif strategy == "emb":
        keep = {"embedding"}
    else:
        raise ModelError(f"unknown fine-tuning strategy {strategy!r}")
    return {n for n, p in params.partitions.items() if p in keep}


# ---------------------------------------------------------------------------
# parameter initialization


def init_params(cfg: ModelConfig, tgt_vocab_size: int, rng: np.random.Generator,
                ulr_entries: Mapping[str, Tensor] | None = None) -> ParamSet:
    """Fresh parameters.  The output projection starts at zero so an untrained
    model emits exactly uniform distributions."""
    d, ff = cfg.d_model, cfg.d_ff

    def mat(*shape):
        return Tensor(rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape),
                      requires_grad=True)

    entries: dict[str, Tensor] = {}
    parts: dict[str, str] = {}

    def put(name, tensor, part):
        entries[name] = tensor
        parts[name] = part

    put("dec.embed", mat(tgt_vocab_size, d), "embedding")
    put("out.W", Tensor(np.zeros((d, tgt_vocab_size)), requires_grad=True), "embedding")
    put("out.b", Tensor(np.zeros(tgt_vocab_size), requires_grad=True), "embedding")

    for i in range(cfg.n_layer):
        for w in ("wq", "wk", "wv", "wo"):
            put(f"enc.l{i}.{w}", mat(d, d), "encoder")
        put(f"enc.l{i}.ff1", mat(d, ff), "encoder")
        put(f"enc.l{i}.ff1b", Tensor(np.zeros(ff), requires_grad=True), "encoder")
        put(f"enc.l{i}.ff2", mat(ff, d), "encoder")
        put(f"enc.l{i}.ff2b", Tensor(np.zeros(d), requires_grad=True), "encoder")

        for blk in ("self", "cross"):
            for w in ("wq", "wk", "wv", "wo"):
                put(f"dec.l{i}.{blk}.{w}", mat(d, d), "decoder")
        put(f"dec.l{i}.ff1", mat(d, ff), "decoder")
        put(f"dec.l{i}.ff1b", Tensor(np.zeros(ff), requires_grad=True), "decoder")
        put(f"dec.l{i}.ff2", mat(ff, d), "decoder")
        put(f"dec.l{i}.ff2b", Tensor(np.zeros(d), requires_grad=True), "decoder")

    if ulr_entries is not None:
        for name, t in ulr_entries.items():
            put(name, t, "embedding")

    return ParamSet(entries, parts)


# ---------------------------------------------------------------------------
# forward pieces


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


def _dropout(x: Tensor, p: float, rng) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    mask = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return ad.mul(x, Tensor(mask))


def _mha(params, prefix, x_q, x_kv, n_head, mask_bias):
    b, tq, d = x_q.shape
    tk = x_kv.shape[1]
    dk = d // n_head

    def split(x, t):
        return ad.permute(x.reshape(b, t, n_head, dk), (0, 2, 1, 3))

    q = split(ad.matmul(x_q, params[f"{prefix}.wq"]), tq)
    k = split(ad.matmul(x_kv, params[f"{prefix}.wk"]), tk)
    v = split(ad.matmul(x_kv, params[f"{prefix}.wv"]), tk)
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dk))
    if mask_bias is not None:
        scores = ad.add(scores, Tensor(mask_bias))
    attn = ad.softmax(scores, axis=-1)
    out = ad.permute(ad.matmul(attn, v), (0, 2, 1, 3)).reshape(b, tq, d)
    return ad.matmul(out, params[f"{prefix}.wo"])


def _ffn(params, prefix, x):
    h = ad.relu(ad.add(ad.matmul(x, params[f"{prefix}.ff1"]), params[f"{prefix}.ff1b"]))
    return ad.add(ad.matmul(h, params[f"{prefix}.ff2"]), params[f"{prefix}.ff2b"])


def _residual(x, sub, p, rng):
    return ad.layer_norm(ad.add(x, _dropout(sub, p, rng)))


def encode(params, cfg: ModelConfig, src_embed: Tensor, src_pad: np.ndarray,
           rng=None) -> Tensor:
    """src_embed: (B, Ts, d) embedded source; src_pad: (B, Ts) bool, True=pad."""
    b, ts, d = src_embed.shape
    x = ad.add(src_embed, Tensor(sinusoidal_positions(ts, d)))
    x = _dropout(x, cfg.dropout, rng)
    key_bias = np.where(src_pad[:, None, None, :], NEG_INF, 0.0)
    for i in range(cfg.n_layer):
        x = _residual(x, _mha(params, f"enc.l{i}", x, x, cfg.n_head, key_bias),
                      cfg.dropout, rng)
        x = _residual(x, _ffn(params, f"enc.l{i}", x), cfg.dropout, rng)
    return x


def decode_logits(params, cfg: ModelConfig, memory: Tensor, src_pad: np.ndarray,
                  tgt_in: np.ndarray, rng=None) -> Tensor:
    """memory: encoder output (B, Ts, d); tgt_in: (B, Tt) decoder input ids.

    Returns logits (B, Tt, V); position t attends only to tgt_in[:, :t+1].
    """
    b, tt = tgt_in.shape
    d = cfg.d_model
    x = ad.embedding_lookup(params["dec.embed"], tgt_in)
    x = ad.add(x, Tensor(sinusoidal_positions(tt, d)))
    x = _dropout(x, cfg.dropout, rng)
    causal = np.where(np.triu(np.ones((tt, tt), dtype=bool), k=1), NEG_INF, 0.0)
    tgt_pad_bias = np.where((tgt_in == PAD)[:, None, None, :], NEG_INF, 0.0)
    self_bias = causal[None, None, :, :] + tgt_pad_bias
    cross_bias = np.where(src_pad[:, None, None, :], NEG_INF, 0.0)
    for i in range(cfg.n_layer):
        x = _residual(x, _mha(params, f"dec.l{i}.self", x, x, cfg.n_head, self_bias),
                      cfg.dropout, rng)
        x = _residual(x, _mha(params, f"dec.l{i}.cross", x, memory, cfg.n_head, cross_bias),
                      cfg.dropout, rng)
        x = _residual(x, _ffn(params, f"dec.l{i}", x), cfg.dropout, rng)
    return ad.add(ad.matmul(x, params["out.W"]), params["out.b"])


# ---------------------------------------------------------------------------
# batching


def make_batch(task, pairs: Sequence[tuple[list[str], list[str]]], max_len: int):
    """Pad a list of (source tokens, target tokens) into id arrays.

    Returns (src_ids, src_pad, tgt_in, tgt_out, tgt_mask).  The decoder input
    is <bos> + target and the gold output is target + <eos>.
    """
    if not pairs:
        raise ModelError("empty batch")
    for s, t in pairs:
        if not s or not t:
            raise ModelError("empty sentence in batch")
        if len(s) > max_len or len(t) + 1 > max_len:
            raise ModelError(
                f"sentence of length {max(len(s), len(t) + 1)} exceeds max_len {max_len}"
            )
    b = len(pairs)
    ts = max(len(s) for s, _ in pairs)
    tt = max(len(t) for _, t in pairs) + 1
    src_ids = np.full((b, ts), PAD, dtype=np.int64)
    tgt_in = np.full((b, tt), PAD, dtype=np.int64)
    tgt_out = np.full((b, tt), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(pairs):
        sid = task.src_vocab.encode(s)
        tid = task.tgt_vocab.encode(t)
        src_ids[i, : len(sid)] = sid
        tgt_in[i, 0] = BOS
        tgt_in[i, 1 : len(tid) + 1] = tid
        tgt_out[i, : len(tid)] = tid
        tgt_out[i, len(tid)] = EOS
    src_pad = src_ids == PAD
    tgt_mask = (tgt_out != PAD).astype(np.float64)
    return src_ids, src_pad, tgt_in, tgt_out, tgt_mask


def log_likelihood(params, cfg: ModelConfig, ulr_state, task,
                   pairs: Sequence[tuple[list[str], list[str]]], rng=None) -> Tensor:
    """Negative mean log-probability per target token (differentiable)."""
    src_ids, src_pad, tgt_in, tgt_out, tgt_mask = make_batch(task, pairs, cfg.max_len)
    table = ulr_mod.embedding_table(ulr_state, params, task.lexicon)
    src_embed = ad.embedding_lookup(table, src_ids)
    memory = encode(params, cfg, src_embed, src_pad, rng)
    logits = decode_logits(params, cfg, memory, src_pad, tgt_in, rng)
    logp = ad.log_softmax(logits, axis=-1)
    v = logits.shape[-1]
    onehot = np.eye(v)[tgt_out]
    picked = ad.mul(logp, Tensor(onehot * tgt_mask[:, :, None]))
    n_tokens = float(tgt_mask.sum())
    return ad.scale(picked.sum(), -1.0 / n_tokens)


def greedy_decode(params, cfg: ModelConfig, ulr_state, task,
                  source: Sequence[str], max_steps: int) -> list[str]:
    """Deterministic argmax decoding; ties go to the lowest token id."""
    if max_steps > cfg.max_len:
        raise ModelError(f"max_steps {max_steps} exceeds max_len {cfg.max_len}")
    if max_steps <= 0:
        return []
    with ad.no_grad():
        src_ids = np.asarray([task.src_vocab.encode(list(source))], dtype=np.int64)
        src_pad = src_ids == PAD
        table = ulr_mod.embedding_table(ulr_state, params, task.lexicon)
        memory = encode(params, cfg, ad.embedding_lookup(table, src_ids), src_pad)
        out_ids: list[int] = []
        for _ in range(max_steps):
            tgt_in = np.asarray([[BOS] + out_ids], dtype=np.int64)
            logits = decode_logits(params, cfg, memory, src_pad, tgt_in)
            nxt = int(np.argmax(logits.data[0, -1]))
            if nxt == EOS:
                break
            out_ids.append(nxt)
    return task.tgt_vocab.decode(out_ids)
