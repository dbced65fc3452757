"""Task construction: corpora, token-budget subsampling, synthetic families.

A synthetic family is built from a shared latent language: every source and
target language renders the same latent sentences through its own lexical
bijection plus a bounded local reordering rule, and its query embeddings are
the shared latent concept vectors passed through a small per-language
rotation plus noise.  Cross-lingual transfer therefore exists by
construction, which is what makes trend experiments meaningful at this
scale.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import ulr as ulr_mod
from .model import Vocabulary

log = logging.getLogger(__name__)


class TaskError(ValueError):
    pass


Pair = tuple[list[str], list[str]]


@dataclass
class Corpus:
    """Parallel pairs plus disjoint train/dev/test index sets."""

    pairs: list[Pair]
    splits: dict[str, list[int]]

    def __post_init__(self):
        n = len(self.pairs)
        seen: set[int] = set()
        for name, idx in self.splits.items():
            s = set(idx)
            if s & seen:
                raise TaskError(f"split '{name}' overlaps another split")
            if idx and (min(idx) < 0 or max(idx) >= n):
                raise TaskError(f"split '{name}' has out-of-range indices")
            seen |= s
        for src, tgt in self.pairs:
            if not src or not tgt:
                raise TaskError("empty sentence in corpus")

    def split_pairs(self, name: str) -> list[Pair]:
        return [self.pairs[i] for i in self.splits[name]]

    @property
    def train(self) -> list[Pair]:
        return self.split_pairs("train")

    @property
    def dev(self) -> list[Pair]:
        return self.split_pairs("dev")

    @property
    def test(self) -> list[Pair]:
        return self.split_pairs("test")


@dataclass
class Task:
    """One language pair: corpus, vocabularies, and its embedding state."""

    name: str
    corpus: Corpus
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    lexicon: ulr_mod.LanguageLexicon

    def clone_lexicon(self) -> "Task":
        """Copy with fresh delta state (for independent fine-tuning runs)."""
        return Task(self.name, self.corpus, self.src_vocab, self.tgt_vocab,
                    self.lexicon.clone())


# ---------------------------------------------------------------------------
# corpus files: one pair per line, source TAB target


def _tokenize(text: str, tokenizer: str) -> list[str]:
    if tokenizer == "whitespace":
        return text.split()
    if tokenizer == "char":
        return [c for c in text if not c.isspace()]
    raise TaskError(f"unknown tokenizer {tokenizer!r}")


def _read_pair_file(path, tokenizer) -> list[Pair]:
    pairs = []
    with open(path, "r", encoding="utf-8", newline=None) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            if "\t" not in line:
                raise TaskError(f"{path}:{line_no}: missing tab separator")
            src, tgt = line.split("\t", 1)
            s, t = _tokenize(src, tokenizer), _tokenize(tgt, tokenizer)
            if not s or not t:
                raise TaskError(f"{path}:{line_no}: empty side after tokenization")
            pairs.append((s, t))
    return pairs


def load_corpus(path, tokenizer: str = "whitespace",
                dev_ratio: float = 0.0, test_ratio: float = 0.0,
                split_seed: int = 0) -> Corpus:
    """Load a corpus file; companion <path>.dev / <path>.test files supply the
    held-out splits, otherwise the given ratios carve them from the file."""
    train_pairs = _read_pair_file(path, tokenizer)
    if not train_pairs:
        raise TaskError(f"{path}: empty corpus")
    pairs = list(train_pairs)
    splits = {"train": list(range(len(train_pairs))), "dev": [], "test": []}
    for name in ("dev", "test"):
        side = str(path) + "." + name
        if os.path.exists(side):
            extra = _read_pair_file(side, tokenizer)
            start = len(pairs)
            pairs.extend(extra)
            splits[name] = list(range(start, len(pairs)))
    if not splits["dev"] and not splits["test"] and (dev_ratio or test_ratio):
        rng = np.random.default_rng(split_seed)
        order = rng.permutation(len(pairs)).tolist()
        n_dev = int(len(pairs) * dev_ratio)
        n_test = int(len(pairs) * test_ratio)
        splits["dev"] = sorted(order[:n_dev])
        splits["test"] = sorted(order[n_dev : n_dev + n_test])
        held = set(splits["dev"]) | set(splits["test"])
        splits["train"] = [i for i in range(len(pairs)) if i not in held]
    return Corpus(pairs, splits)


def save_corpus(path, train: Sequence[Pair], dev: Sequence[Pair], test: Sequence[Pair]) -> None:
    def write(p, rows):
        with open(p, "w", encoding="utf-8") as fh:
            for s, t in rows:
                fh.write(" ".join(s) + "\t" + " ".join(t) + "\n")

    write(path, train)
    write(str(path) + ".dev", dev)
    write(str(path) + ".test", test)


# ---------------------------------------------------------------------------
# token-budget subsampling


def subsample_by_tokens(corpus: Corpus, budget: int, seed: int) -> Corpus:
    """Keep a random prefix of the shuffled train split whose target-side
    token count first reaches the budget.  Dev/test are untouched and the
    selection is a prefix, so smaller budgets are subsets of larger ones."""
    if budget < 1:
        raise TaskError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    order = [corpus.splits["train"][i] for i in rng.permutation(len(corpus.splits["train"]))]
    chosen, tokens = [], 0
    for idx in order:
        chosen.append(idx)
        tokens += len(corpus.pairs[idx][1])
        if tokens >= budget:
            break
    else:
        log.warning("corpus has only %d target tokens, below budget %d", tokens, budget)
    return Corpus(corpus.pairs, {**corpus.splits, "train": chosen})


# ---------------------------------------------------------------------------
# synthetic family generation


@dataclass(frozen=True)
class SyntheticFamilySpec:
    n_sources: int = 6
    n_targets: int = 2
    latent_vocab: int = 48
    vocab_size: int = 48                # per-language surface vocabulary
    dim: int = 32                       # embedding dimensionality
    train_sentences_source: int = 20000
    train_sentences_target: int = 8000
    dev_sentences: int = 200
    test_sentences: int = 200
    len_range: tuple[int, int] = (3, 8)
    reorder_window: int = 3             # local reordering window, <= 3
    rotation_scale: float = 0.08        # per-language rotation away from identity
    noise_scale: float = 0.02           # per-token embedding noise
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < self.latent_vocab:
            raise TaskError("vocab_size must be >= latent_vocab")
        if not 1 <= self.reorder_window <= 3:
            raise TaskError("reorder_window must be in [1, 3]")


def _latent_sentence(rng, spec: SyntheticFamilySpec) -> list[int]:
    # four word classes over the latent vocabulary; templates interleave them
    v = spec.latent_vocab
    classes = [range(0, v // 4), range(v // 4, v // 2),
               range(v // 2, 3 * v // 4), range(3 * v // 4, v)]
    length = int(rng.integers(spec.len_range[0], spec.len_range[1] + 1))
    sent = []
    for pos in range(length):
        cls = classes[pos % 4] if rng.random() < 0.8 else classes[int(rng.integers(4))]
        sent.append(int(rng.integers(cls.start, cls.stop)))
    return sent


def _language_transform(lang_seed: int, spec: SyntheticFamilySpec):
    """Deterministic (bijection, reordering) pair for one language."""
    rng = np.random.default_rng(lang_seed)
    bijection = rng.permutation(spec.latent_vocab)
    w = spec.reorder_window
    window_perm = rng.permutation(w)
    offset = int(rng.integers(w))

    def render(latent: list[int], prefix: str) -> list[str]:
        toks = [f"{prefix}{bijection[c]:03d}" for c in latent]
        out = list(toks)
        i = offset
        while i + w <= len(out):
            out[i : i + w] = [out[i + p] for p in window_perm]
            i += w
        return out

    return bijection, window_perm, offset, render


def _rotation(rng, d: int, scale: float) -> np.ndarray:
    q, _ = np.linalg.qr(np.eye(d) + scale * rng.standard_normal((d, d)))
    # qr can flip signs; keep the rotation near identity
    q *= np.sign(np.diag(q))
    return q


def generate_family(spec: SyntheticFamilySpec, out_dir) -> dict:
    """Write corpora, aligned embedding files, ground-truth maps and a
    manifest.  Returns the manifest as a dict (also saved as text)."""
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    latent_vectors = rng.standard_normal((spec.latent_vocab, spec.dim)) / np.sqrt(spec.dim)

    langs = [f"src{i}" for i in range(spec.n_sources)] + [
        f"tgt{i}" for i in range(spec.n_targets)
    ]
    manifest = {
        "seed": spec.seed,
        "dim": spec.dim,
        "latent_vocab": spec.latent_vocab,
        "pivot_embeddings": os.path.join(out_dir, "pivot.vec"),
        "languages": {},
    }

    # pivot ("target-side English") embeddings: the latent vectors themselves
    pivot_tokens = [f"en{c:03d}" for c in range(spec.latent_vocab)]
    ulr_mod.save_embeddings(manifest["pivot_embeddings"], pivot_tokens, latent_vectors)

    for li, lang in enumerate(langs):
        is_target = lang.startswith("tgt")
        lang_seed = spec.seed * 100003 + li + 1
        lrng = np.random.default_rng(lang_seed ^ 0x5EED)
        bijection, perm, offset, render = _language_transform(lang_seed, spec)

        n_train = spec.train_sentences_target if is_target else spec.train_sentences_source

        def pairs_for(n, srng):
            out = []
            for _ in range(n):
                latent = _latent_sentence(srng, spec)
                out.append((render(latent, lang + "_"),
                            [f"en{c:03d}" for c in latent]))
            return out

        srng = np.random.default_rng(lang_seed + 7)
        train = pairs_for(n_train, srng)
        dev = pairs_for(spec.dev_sentences, srng)
        test = pairs_for(spec.test_sentences, srng)

        corpus_path = os.path.join(out_dir, f"{lang}.tsv")
        save_corpus(corpus_path, train, dev, test)

        # aligned query embeddings: rotated latent vectors plus noise
        rot = np.eye(spec.dim) if li == 0 else _rotation(lrng, spec.dim, spec.rotation_scale)
        tokens = [f"{lang}_{bijection[c]:03d}" for c in range(spec.latent_vocab)]
        vectors = latent_vectors @ rot + spec.noise_scale * lrng.standard_normal(
            (spec.latent_vocab, spec.dim)
        )
        emb_path = os.path.join(out_dir, f"{lang}.vec")
        ulr_mod.save_embeddings(emb_path, tokens, vectors)

        truth_path = os.path.join(out_dir, f"{lang}.truth")
        with open(truth_path, "w", encoding="utf-8") as fh:
            fh.write(f"window_perm {' '.join(map(str, perm))} offset {offset}\n")
            for c in range(spec.latent_vocab):
                fh.write(f"{lang}_{bijection[c]:03d}\ten{c:03d}\n")

        manifest["languages"][lang] = {
            "role": "target" if is_target else "source",
            "corpus": corpus_path,
            "embeddings": emb_path,
            "truth": truth_path,
            "train_sentences": n_train,
        }

    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"seed = {spec.seed}\n")
        fh.write(f"dim = {spec.dim}\n")
        fh.write(f"latent_vocab = {spec.latent_vocab}\n")
        fh.write(f"pivot = {manifest['pivot_embeddings']}\n")
        for lang, info in manifest["languages"].items():
            fh.write(
                f"language {lang} role={info['role']} corpus={info['corpus']} "
                f"embeddings={info['embeddings']} truth={info['truth']} "
                f"train_sentences={info['train_sentences']}\n"
            )
    return manifest


# ---------------------------------------------------------------------------
# task assembly


def build_target_vocab(pivot_path) -> Vocabulary:
    tokens, _ = ulr_mod.load_embeddings(pivot_path)
    return Vocabulary(tokens)


def build_task(name: str, corpus_path, emb_path, tgt_vocab: Vocabulary,
               tokenizer: str = "whitespace", max_len: int | None = None) -> Task:
    """Assemble a task from its corpus and aligned embedding file.

    Tokens with no pretrained vector (including the reserved ids) get zero
    query rows.  Pairs with a side longer than max_len are dropped with a
    logged count.
    """
    corpus = load_corpus(corpus_path, tokenizer)
    if max_len is not None:
        keep = {
            i for i, (s, t) in enumerate(corpus.pairs)
            if len(s) <= max_len and len(t) + 1 <= max_len
        }
        dropped = len(corpus.pairs) - len(keep)
        if dropped:
            log.info("%s: dropped %d pairs exceeding max_len=%d", name, dropped, max_len)
            corpus = Corpus(corpus.pairs,
                            {k: [i for i in v if i in keep] for k, v in corpus.splits.items()})
    src_tokens = sorted({tok for s, _ in corpus.pairs for tok in s})
    src_vocab = Vocabulary(src_tokens)
    emb_tokens, emb_vectors = ulr_mod.load_embeddings(emb_path)
    lut = {t: v for t, v in zip(emb_tokens, emb_vectors)}
    query = np.zeros((len(src_vocab), emb_vectors.shape[1]))
    missing = 0
    for i, tok in enumerate(src_vocab.tokens):
        if tok in lut:
            query[i] = lut[tok]
        elif i >= 4:
            missing += 1
    if missing:
        log.warning("%s: %d vocabulary tokens lack pretrained vectors", name, missing)
    return Task(name, corpus, src_vocab, tgt_vocab, ulr_mod.LanguageLexicon(query))


def load_family(manifest_dir, max_len: int | None = None) -> tuple[list[Task], list[Task], str]:
    """Load every task of a generated family; returns (sources, targets,
    pivot embedding path)."""
    manifest_path = os.path.join(manifest_dir, "manifest.txt")
    pivot = None
    entries = []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("pivot = "):
                pivot = line.split(" = ", 1)[1]
            elif line.startswith("language "):
                fields = dict(kv.split("=", 1) for kv in line.split()[2:])
                fields["name"] = line.split()[1]
                entries.append(fields)
    if pivot is None:
        raise TaskError(f"{manifest_path}: missing pivot entry")
    tgt_vocab = build_target_vocab(pivot)
    sources, targets = [], []
    for e in entries:
        task = build_task(e["name"], e["corpus"], e["embeddings"], tgt_vocab,
                          max_len=max_len)
        (targets if e["role"] == "target" else sources).append(task)
    return sources, targets, pivot
