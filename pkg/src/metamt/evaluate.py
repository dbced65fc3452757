"""Scoring and evaluation: corpus BLEU, batched greedy decoding, the
fine-tune-then-score protocol, and metrics records."""

from __future__ import annotations

import dataclasses
import json
import time
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import learner as learner_mod
from . import model as model_mod
from . import tasks as tasks_mod
from .model import BOS, EOS


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# BLEU


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
         max_n: int = 4, smoothing: bool = True) -> float:
    """Corpus-level BLEU in [0, 100]: geometric mean of modified n-gram
    precisions times the brevity penalty.  Smoothing adds one to both the
    clipped match count and the total for n >= 2 (off for the exact variant).
    """
    if len(hypotheses) != len(references):
        raise EvalError("hypothesis and reference counts differ")
    if not hypotheses:
        raise EvalError("empty hypothesis set")
    matches = np.zeros(max_n)
    totals = np.zeros(max_n)
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h = _ngrams(hyp, n)
            r = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    log_precisions = []
    for n in range(1, max_n + 1):
        m, t = matches[n - 1], totals[n - 1]
        if smoothing and n >= 2:
            m, t = m + 1.0, t + 1.0
        if t == 0 or m == 0:
            return 0.0
        log_precisions.append(np.log(m / t))
    bp = 1.0 if hyp_len > ref_len else np.exp(1.0 - ref_len / max(hyp_len, 1))
    return float(100.0 * bp * np.exp(np.mean(log_precisions)))


# ---------------------------------------------------------------------------
# decoding


def batch_greedy_decode(params, cfg, ulr_state, task,
                        sources: Sequence[Sequence[str]], max_steps: int) -> list[list[str]]:
    """Greedy-decode many source sentences in one padded batch."""
    if not sources:
        return []
    if max_steps <= 0:
        return [[] for _ in sources]
    from . import ulr as ulr_mod

    with ad.no_grad():
        b = len(sources)
        ts = max(len(s) for s in sources)
        src_ids = np.full((b, ts), model_mod.PAD, dtype=np.int64)
        for i, s in enumerate(sources):
            ids = task.src_vocab.encode(list(s))
            src_ids[i, : len(ids)] = ids
        src_pad = src_ids == model_mod.PAD
        table = ulr_mod.embedding_table(ulr_state, params, task.lexicon)
        memory = model_mod.encode(params, cfg, ad.embedding_lookup(table, src_ids), src_pad)
        out = np.full((b, 0), 0, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        for _ in range(max_steps):
            tgt_in = np.concatenate([np.full((b, 1), BOS, dtype=np.int64), out], axis=1)
            logits = model_mod.decode_logits(params, cfg, memory, src_pad, tgt_in)
            nxt = np.argmax(logits.data[:, -1, :], axis=-1)
            nxt = np.where(done, EOS, nxt)
            out = np.concatenate([out, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
    results = []
    for i in range(b):
        ids = []
        for t in out[i]:
            if t == EOS:
                break
            ids.append(int(t))
        results.append(task.tgt_vocab.decode(ids))
    return results


def split_bleu(params, cfg, ulr_state, task, max_sentences: int | None = None,
                 split: str = "test") -> float:
    pairs = task.corpus.split_pairs(split)
    if max_sentences is not None:
        pairs = pairs[:max_sentences]
    if not pairs:
        raise EvalError(f"task {task.name} has no {split} pairs")
    hyps = batch_greedy_decode(params, cfg, ulr_state, task,
                               [s for s, _ in pairs], cfg.max_len)
    return bleu(hyps, [t for _, t in pairs])


def zero_shot_eval(theta0, cfg, ulr_state, task, max_sentences: int | None = None) -> float:
    """Decode the test split directly from the initialization: deltas zeroed,
    no updates."""
    if len(task.tgt_vocab) != theta0["dec.embed"].shape[0]:
        raise EvalError(
            f"target vocabulary size {len(task.tgt_vocab)} does not match "
            f"checkpoint embedding rows {theta0['dec.embed'].shape[0]}"
        )
    fresh = task.clone_lexicon()
    fresh.lexicon.reset_delta()
    return split_bleu(theta0, cfg, ulr_state, fresh, max_sentences)


# ---------------------------------------------------------------------------
# fine-tune-then-score protocol


def finetune_and_score(theta0, cfg_model, ulr_state, task, budget: int,
                       learn_cfg: learner_mod.LearnConfig, seed: int,
                       max_test_sentences: int | None = None):
    """Clone the task, subsample its training set to the token budget,
    fine-tune from theta0, and score test BLEU.  Returns (bleu, params, history)."""
    work = task.clone_lexicon()
    work.lexicon.reset_delta()
    sub = tasks_mod.subsample_by_tokens(task.corpus, budget, seed)
    params, history = learner_mod.learn(
        theta0, cfg_model, ulr_state, work, sub.train, sub.dev, learn_cfg, seed=seed
    )
    score = split_bleu(params, cfg_model, ulr_state, work, max_test_sentences)
    return score, params, history


# ---------------------------------------------------------------------------
# metrics log


@dataclass
class MetricsRecord:
    run_id: str
    seed: int
    step: int
    task_id: str
    split: str
    loss: float | None
    bleu: float | None
    token_budget: int | None
    wall_clock: float = dataclasses.field(default_factory=time.time)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def append_metrics(path, records: Sequence[MetricsRecord]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def load_metrics(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out
