import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glat import glm as G
from glat import model as M
from glat import tensor as tn
from glat.errors import ContractError
from glat.vocab import MASK

from conftest import tiny_config

seqs = st.lists(st.integers(0, 3), min_size=0, max_size=6)


def _lcs_brute(a, b):
    best = 0
    for r in range(len(a) + 1):
        for idx in itertools.combinations(range(len(a)), r):
            sub = [a[i] for i in idx]
            it = iter(b)
            if all(any(x == y for y in it) for x in sub):
                best = max(best, r)
    return best


def test_hamming_examples():
    assert G.hamming_distance([1, 2, 3], [1, 5, 3]) == 1
    assert G.hamming_distance([], []) == 0
    with pytest.raises(ContractError):
        G.hamming_distance([1], [1, 2])


def test_levenshtein_examples():
    assert G.levenshtein_distance("kitten", "sitting") == 3
    assert G.levenshtein_distance([1, 2, 3], []) == 3
    assert G.levenshtein_distance([1, 2], [2, 1]) == 2


@settings(max_examples=150, deadline=None)
@given(seqs, seqs)
def test_lcs_matches_brute_force(a, b):
    assert G.lcs_length(a, b) == _lcs_brute(a, b)
    assert G.lcs_distance(a, b) == max(len(a), len(b)) - _lcs_brute(a, b)


@settings(max_examples=150, deadline=None)
@given(seqs, seqs, seqs)
def test_levenshtein_is_a_metric(a, b, c):
    d = G.levenshtein_distance
    assert d(a, b) == d(b, a)
    assert (d(a, b) == 0) == (a == b)
    assert d(a, c) <= d(a, b) + d(b, c)
    assert abs(len(a) - len(b)) <= d(a, b) <= max(len(a), len(b))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8).flatmap(lambda n: st.tuples(st.lists(st.integers(0, 3), min_size=n, max_size=n),
                                                     st.lists(st.integers(0, 3), min_size=n, max_size=n))))
def test_levenshtein_bounded_by_hamming(pair):
    a, b = pair
    assert G.levenshtein_distance(a, b) <= G.hamming_distance(a, b)


def test_sampling_number():
    assert G.sampling_number([1, 2, 3, 4], [1, 2, 3, 4], 0.5) == 0
    assert G.sampling_number([1] * 10, [2] * 10, 0.3) == 3
    assert G.sampling_number([1, 2, 3], [4, 5, 6], 1.0) == 3
    assert G.sampling_number([1, 2, 3], [4, 5, 6], 0.5) == 1
    with pytest.raises(ContractError):
        G.sampling_number([1], [2], 1.5)
    # lcs distance may exceed T, the count is clamped
    assert G.count_from_distance(7, 1.0, 4) == 4


def test_ratio_schedules():
    lin = G.GlancingConfig(schedule="linear", ratio_start=0.5, ratio_end=0.3)
    assert G.ratio_schedule_value(lin, 0, 100) == 0.5
    assert G.ratio_schedule_value(lin, 100, 100) == pytest.approx(0.3)
    assert G.ratio_schedule_value(lin, 50, 100) == pytest.approx(0.4)
    assert G.ratio_schedule_value(G.GlancingConfig(ratio=0.2), 37, 100) == 0.2
    with pytest.raises(ContractError):
        G.ratio_schedule_value(lin, 101, 100)


@pytest.mark.parametrize("strategy", ["random", "p_ref", "one_minus_p_ref", "most_certain",
                                      "most_uncertain", "uniform_mlm"])
def test_glancing_sample_sizes(strategy):
    rng = np.random.default_rng(0)
    y = [6, 7, 8, 9, 10]
    probs = rng.dirichlet(np.ones(12), size=5)
    for S in range(6):
        pos = G.glancing_sample(y, [6] * 5, S, strategy, probs, rng)
        assert len(pos) == S == len(set(pos.tolist()))
        assert np.all(np.diff(pos) > 0) and (S == 0 or pos.max() < 5)
    with pytest.raises(ContractError):
        G.glancing_sample(y, None, 6, strategy, probs, rng)


def test_confidence_strategies_pick_extremes():
    probs = np.full((4, 12), 0.01)
    conf = [0.3, 0.9, 0.5, 0.7]
    for t, c in enumerate(conf):
        probs[t, 6] = c
    y = [6, 6, 6, 6]
    assert G.glancing_sample(y, None, 2, "most_certain", probs).tolist() == [1, 3]
    assert G.glancing_sample(y, None, 2, "most_uncertain", probs).tolist() == [0, 2]


def test_p_ref_never_picks_zero_weight_first():
    probs = np.zeros((3, 12))
    probs[:, 7] = 1.0
    probs[1, 6] = 1.0
    rng = np.random.default_rng(3)
    for _ in range(50):
        assert G.glancing_sample([6, 6, 6], None, 1, "p_ref", probs, rng).tolist() == [1]
        assert 1 not in G.glancing_sample([6, 6, 6], None, 1, "one_minus_p_ref", probs, rng).tolist()


def test_random_positions_respect_lengths():
    rng = np.random.default_rng(0)
    masks = G.random_positions(np.array([3, 5, 1]), np.array([2, 5, 0]), rng, width=6)
    assert masks.sum(1).tolist() == [2, 5, 0]
    assert not masks[0, 3:].any() and not masks[2].any()


def test_replace_inputs_modes(tiny_params):
    enc = M.encode_batch([[6, 7, 8]], tiny_params)
    h = M.initial_decoder_inputs(enc, [3], tiny_params)
    y = np.array([[9, 10, 11]])
    pos = np.array([[False, True, False]])
    out = G.replace_inputs(h, y, pos, tiny_params).data
    emb = M.embed_tokens(tiny_params, y).data
    assert np.array_equal(out[0, 1], emb[0, 1])
    assert np.array_equal(out[0, [0, 2]], h.data[0, [0, 2]])
    assert G.replace_inputs(h, y, np.zeros_like(pos), tiny_params) is h
    masked = G.replace_inputs(h, y, pos, tiny_params, "mask_token").data
    mask_emb = M.embed_tokens(tiny_params, np.array([[MASK]])).data[0, 0]
    assert np.array_equal(masked[0, 0], mask_emb)
    assert np.array_equal(masked[0, 1], emb[0, 1])


def _batch(pairs):
    return [list(p.source) for p in pairs], [list(p.target) for p in pairs]


def test_glanced_positions_get_zero_logit_gradient(tiny_params, pairs):
    src, tgt = _batch(pairs)
    cfg = G.GlancingConfig(ratio=0.9)
    loss, stats = G.glm_loss_batch(src, tgt, tiny_params, cfg, 0.9, glance_rng=np.random.default_rng(1))
    tn.backward(loss)
    grad = stats.logits.grad
    glanced = np.zeros(grad.shape[:2], dtype=bool)
    for b, o in enumerate(stats.outcomes):
        glanced[b, o.sampled_positions] = True
    assert glanced.any()
    assert np.all(grad[glanced] == 0.0)
    assert np.any(grad[~glanced] != 0.0)


def test_lambda_zero_equals_nat_bitwise(pairs):
    params = M.init_params(tiny_config(dropout=0.2), seed=2)
    src, tgt = _batch(pairs)
    ctx1 = M.Context(True, np.random.default_rng([1, 0, 2]), 0.2)
    ctx2 = M.Context(True, np.random.default_rng([1, 0, 2]), 0.2)
    nat, _ = G.nat_loss_batch(src, tgt, params, ctx1)
    tn.backward(nat)
    g_nat = {k: t.grad.copy() for k, t in params.tensors.items() if t.grad is not None}
    for t in params.tensors.values():
        t.grad = None
    glm, _ = G.glm_loss_batch(src, tgt, params, G.GlancingConfig(), 0.0, ctx2, np.random.default_rng(9))
    tn.backward(glm)
    assert glm.item() == nat.item()
    for k, g in g_nat.items():
        assert np.array_equal(params[k].grad, g), k


def test_full_glance_is_degenerate_but_finite(tiny_params, pairs):
    src, tgt = _batch(pairs)
    cfg = G.GlancingConfig(length_loss_weight=0.0)
    loss, stats = G.glm_loss_batch(src, tgt, tiny_params, cfg, 0.5, force_count=100)
    # every token glanced: nothing left to predict
    assert loss.item() == 0.0
    assert all(o.sampling_number == len(t) for o, t in zip(stats.outcomes, tgt))
    tn.get_tape().clear()


def test_outcomes_record_distance_and_count(tiny_params, pairs):
    src, tgt = _batch(pairs)
    _, stats = G.glm_loss_batch(src, tgt, tiny_params, G.GlancingConfig(), 0.5)
    for o, y in zip(stats.outcomes, tgt):
        assert o.distance == G.hamming_distance(y, o.first_pass_prediction)
        assert o.sampling_number == G.count_from_distance(o.distance, 0.5, len(y))
    tn.get_tape().clear()


def test_fixed_count_schedule_ignores_distance(tiny_params, pairs):
    src, tgt = _batch(pairs)
    cfg = G.GlancingConfig(schedule="fixed_count", ratio=0.5)
    _, stats = G.glm_loss_batch(src, tgt, tiny_params, cfg, 0.5)
    assert [o.sampling_number for o in stats.outcomes] == [len(y) // 2 for y in tgt]
    tn.get_tape().clear()


def test_uniform_mlm_leaves_at_least_one_target(tiny_params, pairs):
    src, tgt = _batch(pairs)
    cfg = G.GlancingConfig(selection_strategy="uniform_mlm", input_mode="mask_token")
    for seed in range(5):
        _, stats = G.glm_loss_batch(src, tgt, tiny_params, cfg, 0.5, glance_rng=np.random.default_rng(seed))
        assert all(0 <= o.sampling_number < len(y) for o, y in zip(stats.outcomes, tgt))
    tn.get_tape().clear()


def test_first_pass_hook_sees_untouched_state(tiny_params, pairs):
    src, tgt = _batch(pairs)
    before = tn.parameters_digest(tiny_params.tensors)
    seen = []
    G.glm_loss_batch(src, tgt, tiny_params, G.GlancingConfig(), 0.5,
                     after_first_pass=lambda: seen.append(
                         (tn.parameters_digest(tiny_params.tensors), len(tn.get_tape()))))
    assert seen[0][0] == before
    tn.get_tape().clear()


def test_config_validation():
    with pytest.raises(ContractError):
        G.GlancingConfig(selection_strategy="greedy").validate()
    with pytest.raises(ContractError):
        G.GlancingConfig(ratio=1.2).validate()
    assert G.GlancingConfig(schedule="decreasing_count").proportional_to_length
