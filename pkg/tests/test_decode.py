import numpy as np
import pytest

from glat import model as M
from glat.decode import (DecodeConfig, at_greedy_batch, ctc_batch, decode_corpus, npd_batch,
                         npd_decode, parallel_greedy_batch, parallel_greedy_decode)
from glat.errors import ContractError

from conftest import tiny_config

SOURCES = [[6, 7, 8], [9, 10], [11, 6, 7, 8, 9]]


def test_parallel_greedy_single_pass(tiny_params):
    res = parallel_greedy_batch(SOURCES, tiny_params)
    for r in res:
        assert r.decoder_pass_count == 1
        assert len(r.tokens) == r.length
    fixed = parallel_greedy_decode([6, 7], tiny_params, length=4)
    assert fixed.length == 4 and len(fixed.tokens) == 4


def test_npd_m1_is_bitwise_greedy(tiny_params):
    g = parallel_greedy_batch(SOURCES, tiny_params)
    n = npd_batch(SOURCES, tiny_params, 1)
    assert [r.tokens for r in g] == [r.tokens for r in n]
    assert [r.score for r in g] == [r.score for r in n]


@pytest.mark.parametrize("m", [2, 3, 7])
def test_npd_picks_max_candidate(tiny_params, m):
    for r in npd_batch(SOURCES, tiny_params, m):
        assert r.decoder_pass_count == len(r.candidate_scores) == m
        assert r.score == max(r.candidate_scores)
        assert len(set(r.candidate_lengths)) == m
        assert r.length in r.candidate_lengths


def test_npd_with_teacher_reranker(tiny_params):
    teacher = M.init_params(tiny_config(causal=True), seed=4)
    r = npd_decode([6, 7, 8], tiny_params, 3, reranker="at_teacher", teacher=teacher)
    assert r.score == max(r.candidate_scores)
    assert r.score == pytest.approx(M.at_score([[6, 7, 8]], [r.tokens], teacher)[0])
    with pytest.raises(ContractError):
        npd_decode([6], tiny_params, 2, reranker="at_teacher")


def test_ctc_decode_collapses(tiny_params):
    for r, s in zip(ctc_batch(SOURCES, tiny_params), SOURCES):
        assert r.decoder_pass_count == 1
        assert len(r.tokens) <= 2 * len(s)
        assert all(t != 5 for t in r.tokens)


def test_at_pass_count_is_output_length():
    params = M.init_params(tiny_config(causal=True), seed=1)
    for r in at_greedy_batch(SOURCES, params):
        assert r.decoder_pass_count == len(r.tokens)


def test_decode_corpus_batches_consistently(tiny_params):
    whole = decode_corpus(SOURCES, tiny_params, DecodeConfig(batch_size=128))
    split = decode_corpus(SOURCES, tiny_params, DecodeConfig(batch_size=1))
    assert [r.tokens for r in whole] == [r.tokens for r in split]
    with pytest.raises(ContractError):
        decode_corpus(SOURCES, tiny_params, DecodeConfig(mode="beam"))
    with pytest.raises(ContractError):
        DecodeConfig(mode="npd", m=0).validate()
