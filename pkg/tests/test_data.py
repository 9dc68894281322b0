import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glat.data import (SentencePair, SynthTask, SynthTaskSpec, bleu, bleu_stats, exact_match,
                       generate_corpus, length_bucket_eval, read_corpus, repetition_ratio,
                       write_corpus)
from glat.errors import ContractError

sentences = st.lists(st.lists(st.integers(6, 12), min_size=1, max_size=8), min_size=1, max_size=6)


def test_bleu_hand_example():
    # 1-gram 3/4, 2-gram 2/3, 3-gram 1/2, 4-gram 0/1 -> smoothed 1/2; no brevity penalty
    expected = 100 * math.exp((math.log(3 / 4) + math.log(2 / 3) + math.log(1 / 2) + math.log(1 / 2)) / 4)
    assert bleu([[1, 2, 3, 5]], [[1, 2, 3, 4]]) == pytest.approx(expected, abs=1e-6)
    assert expected == pytest.approx(59.4604, abs=1e-4)


def test_bleu_brevity_penalty_and_edges():
    assert bleu([[1, 2, 3, 4]], [[1, 2, 3, 4]]) == 100.0
    short = bleu([[1, 2, 3, 4]], [[1, 2, 3, 4, 5, 6, 7, 8]])
    assert short == pytest.approx(100 * math.exp(1 - 2), rel=1e-9)
    assert bleu([[7, 8]], [[1, 2]]) == 0.0
    assert bleu([[]], [[1, 2]]) == 0.0
    with pytest.raises(ContractError):
        bleu([[1]], [])


def test_bleu_stats_clip_counts():
    matches, totals, h, r = bleu_stats([[1, 1, 1]], [[1, 2]])
    assert matches[0] == 1 and totals[0] == 3 and (h, r) == (3, 2)


@settings(max_examples=60, deadline=None)
@given(sentences)
def test_identity_corpus_scores_100(refs):
    assert bleu(refs, refs) == pytest.approx(100.0)


@settings(max_examples=60, deadline=None)
@given(sentences, sentences, st.randoms())
def test_bleu_invariant_under_pair_order(hyps, refs, rnd):
    n = min(len(hyps), len(refs))
    hyps, refs = hyps[:n], refs[:n]
    order = list(range(n))
    rnd.shuffle(order)
    assert bleu([hyps[i] for i in order], [refs[i] for i in order]) == pytest.approx(bleu(hyps, refs))


@settings(max_examples=60, deadline=None)
@given(sentences, st.randoms())
def test_repetition_ratio_properties(corpus, rnd):
    r = repetition_ratio(corpus)
    assert 0.0 <= r < 1.0
    shuffled = list(corpus)
    rnd.shuffle(shuffled)
    assert repetition_ratio(shuffled) == pytest.approx(r)


def test_repetition_ratio_example():
    assert repetition_ratio([[1, 1, 2, 2, 2], [3]]) == pytest.approx(3 / 6)
    assert repetition_ratio([]) == 0.0


def test_exact_match():
    assert exact_match([[1], [2, 3]], [[1], [2]]) == 0.5


def test_length_buckets_cover_corpus():
    srcs = [[1] * n for n in (1, 2, 3, 4, 7, 7)]
    rows = length_bucket_eval(srcs, srcs, srcs, 3)
    assert [r["bucket"] for r in rows] == ["1-3", "4-6", "7-9"]
    assert sum(r["count"] for r in rows) == len(srcs)
    assert rows[1]["count"] == 1
    assert all(r["bleu"] == pytest.approx(100.0) for r in rows)
    gap = length_bucket_eval([[1]], [[1]], [[1] * 8], 3)
    assert gap[0]["count"] == 0 and gap[0]["bleu"] is None


def test_mapped_copy_identity_and_permutation():
    ident = SynthTaskSpec(transformation="mapped_copy", identity_map=True)
    for p in generate_corpus(ident, 20):
        assert p.target == p.source
    spec = SynthTaskSpec(transformation="mapped_copy", seed=3)
    task = SynthTask(spec)
    assert sorted(task.perm.values()) == sorted(task.perm)


def test_local_reorder_permutes_mapped_copy():
    spec = SynthTaskSpec(transformation="local_reorder", seed=1)
    task = SynthTask(spec)
    swapped = 0
    for p in generate_corpus(spec, 200):
        mapped = [task.perm[t] for t in p.source]
        assert Counter(mapped) == Counter(p.target)
        odd = sum(t in task.trigger for t in p.source) % 2 == 1
        swapped += odd
        if odd:
            assert all(p.target[i] == mapped[i ^ 1] for i in range(len(mapped) - len(mapped) % 2))
        else:
            assert list(p.target) == mapped
    assert 60 < swapped < 140


def test_expand_contract_changes_lengths():
    spec = SynthTaskSpec(transformation="expand_contract", seed=2)
    corpus = generate_corpus(spec, 200)
    assert any(len(p.target) != len(p.source) for p in corpus)
    assert all(1 <= len(p.target) <= 2 * len(p.source) for p in corpus)


def test_generation_is_deterministic_and_splits_differ():
    spec = SynthTaskSpec(seed=4)
    assert generate_corpus(spec, 30) == generate_corpus(spec, 30)
    assert generate_corpus(spec, 30, sample_seed=99) != generate_corpus(spec, 30)
    task = SynthTask(spec)
    assert all(task.translate(p.source) == list(p.target)
               for p in generate_corpus(spec, 30, sample_seed=99))


def test_spec_validation():
    with pytest.raises(ContractError):
        SynthTaskSpec(vocab_size=7).validate()
    with pytest.raises(ContractError):
        SynthTaskSpec(transformation="shuffle").validate()
    with pytest.raises(ContractError):
        SynthTaskSpec(min_len=5, max_len=3).validate()


def test_corpus_file_round_trip(tmp_path):
    corpus = generate_corpus(SynthTaskSpec(), 10)
    write_corpus(tmp_path / "c", corpus, 32)
    back, vocab = read_corpus(tmp_path / "c")
    assert back == corpus and vocab == 32
    (tmp_path / "c.tgt").write_text("# vocab_size=32\n1 2\n")
    with pytest.raises(ContractError):
        read_corpus(tmp_path / "c")


def test_sentence_pair_normalises_to_int_tuples():
    p = SentencePair(np.array([6, 7]), [8])
    assert p.source == (6, 7) and isinstance(p.source[0], int)
