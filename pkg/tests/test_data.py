import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobilebert_kit.data import (
    CLS,
    MASK,
    NUM_RESERVED,
    PAD,
    REPLACE_KEEP,
    REPLACE_MASK,
    REPLACE_RANDOM,
    SEP,
    Corpus,
    generate_corpus,
    iter_batches,
    make_batch,
    mask_sequence,
    num_masked,
)
from mobilebert_kit.errors import ContractError, DataError, DomainError

CORPUS = generate_corpus(0, 100, 50)


def test_generator_is_deterministic_and_seed_sensitive():
    again = generate_corpus(0, 100, 50)
    assert all(np.array_equal(a, b) for a, b in zip(CORPUS.sentences(), again.sentences()))
    other = np.concatenate(list(generate_corpus(1, 100, 50).sentences()))
    mine = np.concatenate(list(CORPUS.sentences()))
    n = min(len(other), len(mine))
    assert np.any(other[:n] != mine[:n])


def test_content_ids_avoid_reserved_range():
    ids = np.concatenate(list(CORPUS.sentences()))
    assert ids.min() >= NUM_RESERVED and ids.max() < 100


def test_small_vocab_rejected():
    with pytest.raises(DomainError):
        generate_corpus(0, 15, 10)


def test_markov_structure_is_sparse():
    # every token has at most three distinct successors inside a document
    succ = {}
    for doc in CORPUS.documents:
        flat = np.concatenate(doc)
        for a, b in zip(flat[:-1], flat[1:]):
            succ.setdefault(int(a), set()).add(int(b))
    assert max(len(s) for s in succ.values()) <= 3


def test_corpus_save_load_roundtrip(tmp_path):
    path = tmp_path / "corpus.txt"
    CORPUS.save(path)
    back = Corpus.load(path)
    assert back.vocab == CORPUS.vocab
    assert len(back.documents) == len(CORPUS.documents)
    assert all(np.array_equal(a, b) for a, b in zip(back.sentences(), CORPUS.sentences()))


def test_masked_count_rule():
    assert num_masked(20) == 3
    assert num_masked(3) == 1
    tokens = np.array([CLS] + list(range(5, 23)) + [SEP])
    pos, labels, _ = mask_sequence(tokens, 20, 100, np.random.default_rng(0))
    assert len(pos) == 3 and len(labels) == 3


def test_batch_layout_and_invariants():
    b = make_batch(CORPUS, 8, 24, 3)
    assert b.token_ids.shape == b.segment_ids.shape == b.attention_mask.shape == (8, 24)
    for row in range(8):
        valid = int(b.attention_mask[row].sum())
        seq = b.token_ids[row]
        assert seq[0] == CLS and seq[valid - 1] == SEP and np.all(seq[valid:] == PAD)
        sel = b.mlm_batch == row
        assert sel.sum() == num_masked(valid)
        assert np.all(b.mlm_positions[sel] < valid)
        # segment B starts right after the first SEP and runs to the end
        seps = [i for i in range(valid) if seq[i] == SEP and i not in b.mlm_positions[sel]]
        assert b.segment_ids[row, seps[-1]] == 1 and b.segment_ids[row, 0] == 0
    assert len(b.mlm_labels) == len(b.mlm_positions)
    assert np.all(b.mlm_labels >= NUM_RESERVED)


def test_batches_are_reproducible():
    a, b = make_batch(CORPUS, 4, 16, 9), make_batch(CORPUS, 4, 16, 9)
    for field in ("token_ids", "segment_ids", "attention_mask", "mlm_positions", "mlm_labels", "nsp_labels"):
        assert np.array_equal(getattr(a, field), getattr(b, field))


def test_batch_errors():
    with pytest.raises(ContractError):
        make_batch(CORPUS, 2, 7, 0)
    tiny = Corpus(CORPUS.vocab, CORPUS.documents[:1])
    with pytest.raises(DataError):
        make_batch(tiny, 2, 16, 0)
    with pytest.raises(DataError):
        make_batch(CORPUS, 10_000, 16, 0)


def test_nsp_balance_over_ten_thousand_pairs():
    big = generate_corpus(1, 200, 400)
    labels = np.concatenate([make_batch(big, 100, 16, s).nsp_labels for s in range(100)])
    assert abs(labels.mean() - 0.5) <= 0.02


def test_replacement_mix_over_ten_thousand_masks():
    big = generate_corpus(2, 200, 400)
    modes = []
    seed = 0
    while sum(len(m) for m in modes) < 10_000:
        modes.append(make_batch(big, 64, 48, seed).mlm_modes)
        seed += 1
    modes = np.concatenate(modes)
    for kind, share in ((REPLACE_MASK, 0.8), (REPLACE_RANDOM, 0.1), (REPLACE_KEEP, 0.1)):
        assert abs(np.mean(modes == kind) - share) <= 0.02


def test_replacement_kinds_applied():
    b = make_batch(CORPUS, 16, 32, 4)
    at = b.token_ids[b.mlm_batch, b.mlm_positions]
    assert np.all(at[b.mlm_modes == REPLACE_MASK] == MASK)
    assert np.all(at[b.mlm_modes == REPLACE_KEEP] == b.mlm_labels[b.mlm_modes == REPLACE_KEEP])
    assert np.all(at[b.mlm_modes == REPLACE_RANDOM] >= NUM_RESERVED)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(8, 40), st.integers(0, 2**31))
def test_padding_never_masked(B, T, seed):
    b = make_batch(CORPUS, B, T, seed)
    assert np.all(b.attention_mask[b.mlm_batch, b.mlm_positions] == 1)
    assert np.all(b.token_ids[b.attention_mask == 0] == PAD)
    counts = np.bincount(b.mlm_batch, minlength=B)
    assert np.array_equal(counts, [num_masked(int(v)) for v in b.attention_mask.sum(1)])


def test_prefetch_workers_match_serial():
    serial = list(iter_batches(CORPUS, 4, 16, range(6)))
    threaded = list(iter_batches(CORPUS, 4, 16, range(6), workers=3))
    assert all(np.array_equal(a.token_ids, b.token_ids) for a, b in zip(serial, threaded))
