"""CTC objective, Viterbi alignment and glancing training over alignments.

The blank symbol is the reserved ``BLANK`` id of the shared vocabulary, so a
CTC decoder emits logits over the same ``V`` classes as every other decoder.
All dynamic programmes run in log space over the blank-interleaved label
sequence ``[B, y1, B, y2, ..., yT, B]``.
"""

from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np

from . import model as M
from . import tensor as tn
from .errors import InfeasibleAlignmentError
from .glm import StepStats, count_from_distance, distance
from .tensor import Tensor, _log_softmax_np, _result
from .vocab import BLANK

log = logging.getLogger(__name__)

NEG = -1e30


def ctc_collapse(alignment: Sequence[int], blank: int = BLANK) -> list[int]:
    """Merge consecutive repeats, then drop blanks."""
    out: list[int] = []
    prev = None
    for a in alignment:
        a = int(a)
        if a != prev and a != blank:
            out.append(a)
        prev = a
    return out


def min_alignment_length(y: Sequence[int]) -> int:
    """Shortest output that can collapse to ``y``: one frame per token plus a blank per repeat."""
    y = list(y)
    return len(y) + sum(1 for a, b in zip(y, y[1:]) if a == b)


def _extended(y: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(y) + 1, blank, dtype=np.int64)
    ext[1::2] = y
    return ext


def _lse(*xs: np.ndarray) -> np.ndarray:
    m = np.maximum.reduce(xs)
    return m + np.log(sum(np.exp(x - m) for x in xs))


def _shift(a: np.ndarray, k: int) -> np.ndarray:
    """Shift the last axis by ``k`` (right if positive, left if negative), filling with NEG."""
    out = np.full_like(a, NEG)
    n = a.shape[-1]
    if abs(k) < n:
        if k > 0:
            out[..., k:] = a[..., :n - k]
        else:
            out[..., :n + k] = a[..., -k:]
    return out


def _prepare(targets: Sequence[Sequence[int]], out_lengths: np.ndarray, blank: int):
    B = len(targets)
    S = max(2 * len(y) + 1 for y in targets)
    ext = np.full((B, S), blank, dtype=np.int64)
    ext_len = np.zeros(B, dtype=np.int64)
    # skip-transition allowed into state s from s-2
    skip = np.zeros((B, S), dtype=bool)
    for b, y in enumerate(targets):
        e = _extended(y, blank)
        ext[b, :len(e)] = e
        ext_len[b] = len(e)
        for s in range(2, len(e)):
            skip[b, s] = e[s] != blank and e[s] != e[s - 2]
    feasible = np.array([out_lengths[b] >= min_alignment_length(y) for b, y in enumerate(targets)])
    return ext, ext_len, skip, feasible


def _forward(lp: np.ndarray, ext, ext_len, skip, out_lengths, maximize: bool = False):
    """alpha [B, L, S]; with ``maximize`` the Viterbi scores plus backpointers."""
    B, L, _ = lp.shape
    S = ext.shape[1]
    bidx = np.arange(B)[:, None]
    emit = lp[bidx[:, :, None], np.arange(L)[None, :, None], ext[:, None, :]]  # [B, L, S]
    valid_s = np.arange(S)[None, :] < ext_len[:, None]
    alpha = np.full((B, L, S), NEG)
    back = np.zeros((B, L, S), dtype=np.int64) if maximize else None
    alpha[:, 0, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[:, 0, 1] = np.where(ext_len > 1, emit[:, 0, 1], NEG)
    for t in range(1, L):
        prev = alpha[:, t - 1]
        stay = prev
        one = _shift(prev, 1)
        two = np.where(skip, _shift(prev, 2), NEG)
        if maximize:
            # preference order on ties: predecessor in a blank state, then stay, then skip
            is_blank = ext == ext[:, :1]  # column 0 is always blank
            cand = np.stack([stay, one, two], axis=-1)  # shift 0, 1, 2
            pref = np.where(is_blank[..., None], np.array([0, 1, 2]), np.array([1, 0, 2]))
            ordered = np.take_along_axis(cand, pref, axis=-1)
            k = ordered.argmax(axis=-1)
            best = np.take_along_axis(ordered, k[..., None], axis=-1)[..., 0]
            back[:, t] = np.take_along_axis(pref, k[..., None], axis=-1)[..., 0]
            new = best
        else:
            new = _lse(stay, one, two)
        new = np.where(valid_s, new + emit[:, t], NEG)
        alpha[:, t] = np.where((t < out_lengths)[:, None], np.maximum(new, NEG), NEG)
    return alpha, back, emit


def _final_states(ext_len: np.ndarray):
    last = ext_len - 1
    second = np.maximum(ext_len - 2, 0)
    return last, second


def _log_likelihood(alpha, ext_len, out_lengths, maximize: bool = False):
    B = alpha.shape[0]
    b = np.arange(B)
    fin = alpha[b, out_lengths - 1]
    last, second = _final_states(ext_len)
    a1 = fin[b, last]
    a2 = np.where(ext_len > 1, fin[b, second], NEG)
    if maximize:
        return np.maximum(a1, a2), np.where(a1 >= a2, last, second)
    return _lse(a1, a2), None


def _backward(emit, ext, ext_len, skip, out_lengths):
    B, L, S = emit.shape
    valid_s = np.arange(S)[None, :] < ext_len[:, None]
    beta = np.full((B, L, S), NEG)
    last, second = _final_states(ext_len)
    skip_from = np.zeros_like(skip)
    skip_from[:, :max(S - 2, 0)] = skip[:, 2:]
    b = np.arange(B)
    for t in range(L - 1, -1, -1):
        init = np.full((B, S), NEG)
        init[b, last] = emit[b, t, last]
        init[b, second] = np.where(ext_len > 1, emit[b, t, second], init[b, second])
        if t + 1 < L:
            nxt = beta[:, t + 1]
            one = _shift(nxt, -1)
            two = np.where(skip_from, _shift(nxt, -2), NEG)
            rec = np.where(valid_s, _lse(nxt, one, two) + emit[:, t], NEG)
        else:
            rec = np.full((B, S), NEG)
        here = np.where((t == out_lengths - 1)[:, None], init,
                        np.where((t < out_lengths - 1)[:, None], rec, NEG))
        beta[:, t] = np.maximum(here, NEG)
    return beta


def ctc_loss_batch(logits: Tensor, targets: Sequence[Sequence[int]], out_lengths=None,
                   blank: int = BLANK, skip_infeasible: bool = False) -> Tensor:
    """Per-sentence ``-log sum_{a in B^-1(y)} prod_t p_t(a_t)`` as a [B] tensor.

    ``logits`` is [B, L, V]; frames at or beyond ``out_lengths[b]`` are ignored.
    Infeasible sentences raise unless ``skip_infeasible``, in which case their
    loss is 0 and they receive no gradient.
    """
    logits = tn.as_tensor(logits)
    B, L, V = logits.shape
    out_lengths = np.full(B, L) if out_lengths is None else np.asarray(out_lengths, dtype=np.int64)
    ext, ext_len, skip, feasible = _prepare(targets, out_lengths, blank)
    if not feasible.all() and not skip_infeasible:
        bad = int(np.flatnonzero(~feasible)[0])
        raise InfeasibleAlignmentError(
            f"output length {int(out_lengths[bad])} cannot align target of length "
            f"{len(targets[bad])} (needs {min_alignment_length(targets[bad])})")
    lp = _log_softmax_np(logits.data)
    alpha, _, emit = _forward(lp, ext, ext_len, skip, out_lengths)
    ll, _ = _log_likelihood(alpha, ext_len, out_lengths)
    ll = np.where(feasible, ll, 0.0)

    def bw(g):
        beta = _backward(emit, ext, ext_len, skip, out_lengths)
        gamma = np.exp(np.clip(alpha + beta - emit - ll[:, None, None], -700.0, 0.0))
        gamma = np.where((alpha > NEG / 2) & (beta > NEG / 2), gamma, 0.0)
        occ = np.zeros((B, L, V))
        np.add.at(occ, (np.arange(B)[:, None, None], np.arange(L)[None, :, None], ext[:, None, :]),
                  gamma)
        frames = (np.arange(L)[None, :] < out_lengths[:, None]) & feasible[:, None]
        grad = (np.exp(lp) - occ) * frames[..., None]
        return (grad * np.asarray(g)[:, None, None],)

    return _result(-ll, (logits,), bw)


def ctc_loss(logits: Tensor, y: Sequence[int], blank: int = BLANK) -> Tensor:
    """Scalar CTC loss for one ``[L, V]`` logit matrix."""
    logits = tn.as_tensor(logits)
    per = ctc_loss_batch(tn.reshape(logits, (1,) + logits.shape), [list(y)], blank=blank)
    return tn.reshape(per, ())


def best_alignments(logits: np.ndarray, targets: Sequence[Sequence[int]], out_lengths=None,
                    blank: int = BLANK) -> list[list[int] | None]:
    """Most probable alignment in ``B^-1(y)`` for each sentence (``None`` if infeasible)."""
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    B, L, _ = logits.shape
    out_lengths = np.full(B, L) if out_lengths is None else np.asarray(out_lengths, dtype=np.int64)
    ext, ext_len, skip, feasible = _prepare(targets, out_lengths, blank)
    lp = _log_softmax_np(logits)
    alpha, back, _ = _forward(lp, ext, ext_len, skip, out_lengths, maximize=True)
    _, final = _log_likelihood(alpha, ext_len, out_lengths, maximize=True)
    result: list[list[int] | None] = []
    for b in range(B):
        if not feasible[b]:
            result.append(None)
            continue
        s = int(final[b])
        path = []
        for t in range(int(out_lengths[b]) - 1, -1, -1):
            path.append(int(ext[b, s]))
            if t > 0:
                s -= int(back[b, t, s])
        result.append(path[::-1])
    return result


def best_alignment(logits, y: Sequence[int], blank: int = BLANK) -> list[int]:
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    a = best_alignments(logits[None], [list(y)], blank=blank)[0]
    if a is None:
        raise InfeasibleAlignmentError(
            f"{logits.shape[0]} frames cannot align a target needing {min_alignment_length(y)}")
    return a


def alignment_log_prob(logits, alignment: Sequence[int]) -> float:
    lp = _log_softmax_np(np.asarray(logits))
    return float(lp[np.arange(len(alignment)), np.asarray(alignment)].sum())


# ---------------------------------------------------------------------------
# training and decoding

def alignment_word_index(alignment: Sequence[int], blank: int = BLANK) -> np.ndarray:
    """Index of the target word each frame emits, ``-1`` for blank frames."""
    idx = np.full(len(alignment), -1, dtype=np.int64)
    w, prev = -1, blank
    for t, tok in enumerate(alignment):
        if tok != blank:
            if tok != prev:
                w += 1
            idx[t] = w
        prev = tok
    return idx


def ctc_output_lengths(sources) -> np.ndarray:
    return np.array([2 * len(x) for x in sources], dtype=np.int64)


def glat_ctc_loss_batch(sources, targets, params: M.ModelParams, ratio: float,
                        ctx: M.Context = M.EVAL, glance_rng: np.random.Generator | None = None,
                        metric: str = "lcs", force_all: bool | None = None,
                        after_first_pass: Callable[[], None] | None = None) -> tuple[Tensor, StepStats]:
    """Glancing over best alignments with a CTC loss on the second pass.

    ``force_all=True`` glances every non-blank frame of the best alignment and
    ``False`` glances none, regardless of ``ratio``.
    """
    glance_rng = glance_rng if glance_rng is not None else np.random.default_rng(0)
    stats = StepStats()
    out_len = ctc_output_lengths(sources)
    B = len(sources)
    mask = M.target_mask(out_len)
    enc = M.encode_batch(sources, params, ctx)
    h = M.initial_decoder_inputs(enc, out_len, params)
    with tn.no_grad():
        first = M.decode_parallel(h, enc, params, mask, M.EVAL).data
    if after_first_pass is not None:
        after_first_pass()
    pred = M.argmax_tokens(first)
    feasible = np.array([out_len[b] >= min_alignment_length(targets[b]) for b in range(B)])
    if not feasible.all():
        log.warning("skipping %d sentence(s) too long for a %s-frame CTC output",
                    int((~feasible).sum()), "2N")
    width = mask.shape[1]
    aligned = np.full((B, width), BLANK, dtype=np.int64)
    counts = np.zeros(B, dtype=np.int64)
    dists = np.zeros(B, dtype=np.int64)
    need_align = force_all is True or (force_all is None and ratio > 0)
    best = best_alignments(first, targets, out_len) if need_align else [None] * B
    glanced = np.zeros((B, width), dtype=bool)
    for b in range(B):
        y_hat = ctc_collapse(pred[b, :out_len[b]])
        dists[b] = distance(targets[b], y_hat, metric)
        a = best[b]
        if a is None or not feasible[b]:
            continue
        aligned[b, :len(a)] = a
        T = len(targets[b])
        if force_all is True:
            counts[b] = T
        elif force_all is None:
            counts[b] = count_from_distance(int(dists[b]), ratio, T)
        if counts[b] == 0:
            continue
        # reveal every frame that the best alignment assigns to a chosen target word
        word = alignment_word_index(a)
        chosen = np.argsort(glance_rng.random(T), kind="stable")[:counts[b]]
        glanced[b, :len(a)] = np.isin(word, chosen)

    h2 = h if not glanced.any() else tn.where(glanced[..., None], M.embed_tokens(params, aligned), h)
    logits = M.decode_parallel(h2, enc, params, mask, ctx)
    per = ctc_loss_batch(logits, targets, out_len, skip_infeasible=True)
    n_tok = float(sum(len(targets[b]) for b in range(B) if feasible[b]))
    loss = tn.div(tn.sum_(per), max(n_tok, 1.0))
    stats.loss = stats.token_loss = loss.item()
    stats.mean_distance = float(dists.mean())
    stats.mean_glance_fraction = float(np.mean(counts / np.maximum([len(y) for y in targets], 1)))
    return loss, stats


def glat_ctc_train_step(pair, params: M.ModelParams, ratio: float, ctx: M.Context = M.EVAL,
                        glance_rng: np.random.Generator | None = None) -> Tensor:
    return glat_ctc_loss_batch([pair.source], [pair.target], params, ratio, ctx, glance_rng)[0]
