"""Synthetic corpus and masked-LM / next-sentence batch construction."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import ContractError, DataError, DomainError

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
RESERVED_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
NUM_RESERVED = len(RESERVED_TOKENS)

MASK_FRACTION = 0.15
# replacement kinds recorded per masked position
REPLACE_MASK, REPLACE_RANDOM, REPLACE_KEEP = 0, 1, 2


@dataclass
class Corpus:
    vocab: list[str]
    documents: list[list[np.ndarray]]

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def sentences(self) -> Iterator[np.ndarray]:
        for doc in self.documents:
            yield from doc

    def unigram_counts(self) -> np.ndarray:
        counts = np.zeros(self.vocab_size, dtype=np.int64)
        for s in self.sentences():
            counts += np.bincount(s, minlength=self.vocab_size)
        return counts

    def sentence_pairs(self) -> list[tuple[int, int]]:
        """``(doc, i)`` for every sentence that has a successor in its document."""
        return [(d, i) for d, doc in enumerate(self.documents) for i in range(len(doc) - 1)]

    def save(self, path: str | os.PathLike):
        """One sentence per line as space-separated ids; blank line between documents.

        The vocabulary goes to a ``<path>.vocab.json`` sidecar.
        """
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            for d, doc in enumerate(self.documents):
                if d:
                    fh.write("\n")
                for s in doc:
                    fh.write(" ".join(str(int(t)) for t in s) + "\n")
        with open(vocab_path(path), "w", encoding="utf-8") as fh:
            json.dump({"vocab": self.vocab, "reserved": dict(zip(RESERVED_TOKENS, range(NUM_RESERVED)))}, fh)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Corpus":
        path = Path(path)
        with open(vocab_path(path), encoding="utf-8") as fh:
            vocab = json.load(fh)["vocab"]
        documents: list[list[np.ndarray]] = [[]]
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    if documents[-1]:
                        documents.append([])
                    continue
                documents[-1].append(np.array([int(t) for t in line.split()], dtype=np.int64))
        documents = [d for d in documents if d]
        corpus = cls(vocab, documents)
        for s in corpus.sentences():
            if s.size and (s.min() < 0 or s.max() >= len(vocab)):
                raise DomainError(f"{path}: token id outside vocabulary of size {len(vocab)}")
        return corpus


def vocab_path(path: str | os.PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".vocab.json")


def generate_corpus(
    seed: int,
    vocab_size: int,
    num_docs: int,
    sentences_per_doc: tuple[int, int] = (4, 12),
    sentence_len: tuple[int, int] = (5, 12),
    branching: int = 3,
) -> Corpus:
    """Markov-chain corpus with a fixed per-seed sparse transition table.

    Each content token has ``branching`` possible successors with Dirichlet
    weights; a document is one chain cut into sentences, so the first token of
    a true next sentence follows from the last token of the previous one.
    """
    if vocab_size < 16:
        raise DomainError(f"vocab_size must be >= 16, got {vocab_size}")
    rng = np.random.default_rng(seed)
    n_content = vocab_size - NUM_RESERVED
    succ = np.stack([rng.choice(n_content, size=branching, replace=False) for _ in range(n_content)])
    probs = rng.dirichlet(np.ones(branching), size=n_content)
    cum = np.cumsum(probs, axis=1)
    vocab = list(RESERVED_TOKENS) + [f"w{i}" for i in range(NUM_RESERVED, vocab_size)]

    documents = []
    for _ in range(num_docs):
        n_sent = int(rng.integers(sentences_per_doc[0], sentences_per_doc[1] + 1))
        lengths = rng.integers(sentence_len[0], sentence_len[1] + 1, size=n_sent)
        state = int(rng.integers(n_content))
        doc = []
        for length in lengths:
            sent = np.empty(int(length), dtype=np.int64)
            for k in range(int(length)):
                sent[k] = state + NUM_RESERVED
                state = int(succ[state, min(np.searchsorted(cum[state], rng.random()), branching - 1)])
            doc.append(sent)
        documents.append(doc)
    return Corpus(vocab, documents)


@dataclass
class PretrainBatch:
    token_ids: np.ndarray  # [B, T]
    segment_ids: np.ndarray  # [B, T]
    attention_mask: np.ndarray  # [B, T], 1 = real token
    mlm_batch: np.ndarray  # [M] row of each masked position
    mlm_positions: np.ndarray  # [M] column of each masked position
    mlm_labels: np.ndarray  # [M] original token ids
    mlm_modes: np.ndarray  # [M] REPLACE_MASK / REPLACE_RANDOM / REPLACE_KEEP
    nsp_labels: np.ndarray  # [B], 1 = B really follows A

    @property
    def mlm_index(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mlm_batch, self.mlm_positions

    @property
    def batch_size(self) -> int:
        return self.token_ids.shape[0]


def num_masked(valid_tokens: int) -> int:
    return max(1, int(np.floor(MASK_FRACTION * valid_tokens)))


def mask_sequence(tokens: np.ndarray, valid: int, vocab_size: int, rng: np.random.Generator):
    """Choose masked positions among non-special tokens and apply 80/10/10 replacement.

    Returns ``(positions, labels, modes)``; ``tokens`` is modified in place.
    """
    candidates = np.flatnonzero(tokens[:valid] >= NUM_RESERVED)
    n = min(num_masked(valid), candidates.size)
    if n == 0:
        raise DataError("sequence has no maskable tokens")
    positions = np.sort(rng.choice(candidates, size=n, replace=False))
    labels = tokens[positions].copy()
    draws = rng.random(n)
    modes = np.where(draws < 0.8, REPLACE_MASK, np.where(draws < 0.9, REPLACE_RANDOM, REPLACE_KEEP))
    randoms = rng.integers(NUM_RESERVED, vocab_size, size=n)
    tokens[positions] = np.where(modes == REPLACE_MASK, MASK, np.where(modes == REPLACE_RANDOM, randoms, labels))
    return positions, labels, modes


def make_batch(corpus: Corpus, B: int, T: int, seed: int) -> PretrainBatch:
    """``[CLS] A [SEP] B [SEP]`` pairs, half true continuations, with MLM masking."""
    if T < 8:
        raise ContractError(f"sequence length T must be >= 8, got {T}")
    pairs = corpus.sentence_pairs()
    if len(pairs) < B or len(corpus.documents) < 2:
        raise DataError(
            f"corpus too small for {B} pairs: {len(pairs)} consecutive sentence pairs in "
            f"{len(corpus.documents)} documents")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(pairs), size=B, replace=False)

    token_ids = np.full((B, T), PAD, dtype=np.int64)
    segment_ids = np.zeros((B, T), dtype=np.int64)
    attention_mask = np.zeros((B, T), dtype=np.int64)
    nsp = np.zeros(B, dtype=np.int64)
    mb, mp, ml, mm = [], [], [], []
    for row, k in enumerate(chosen):
        d, i = pairs[k]
        a = corpus.documents[d][i]
        if rng.random() < 0.5:
            b = corpus.documents[d][i + 1]
            nsp[row] = 1
        else:
            other = int(rng.integers(len(corpus.documents) - 1))
            other += other >= d
            doc = corpus.documents[other]
            b = doc[int(rng.integers(len(doc)))]
        a, b = list(a), list(b)
        while len(a) + len(b) + 3 > T:
            (a if len(a) >= len(b) else b).pop()
        seq = [CLS] + a + [SEP] + b + [SEP]
        n = len(seq)
        token_ids[row, :n] = seq
        segment_ids[row, len(a) + 2 : n] = 1
        attention_mask[row, :n] = 1
        pos, lab, mode = mask_sequence(token_ids[row], n, corpus.vocab_size, rng)
        mb.append(np.full(pos.size, row))
        mp.append(pos)
        ml.append(lab)
        mm.append(mode)
    return PretrainBatch(token_ids, segment_ids, attention_mask, np.concatenate(mb), np.concatenate(mp),
                         np.concatenate(ml), np.concatenate(mm), nsp)


def iter_batches(corpus: Corpus, B: int, T: int, seeds: Iterable[int], workers: int = 0) -> Iterator[PretrainBatch]:
    """Yield ``make_batch`` for each seed in order, optionally prefetching on threads."""
    seeds = list(seeds)
    if workers <= 0:
        for s in seeds:
            yield make_batch(corpus, B, T, s)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(lambda s: make_batch(corpus, B, T, s), seeds)
