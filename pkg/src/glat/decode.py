"""Inference: single-pass parallel, noisy parallel (NPD), CTC and AT greedy."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model as M
from . import tensor as tn
from .ctc import ctc_collapse, ctc_output_lengths
from .errors import ContractError

MODES = ("parallel_greedy", "npd", "ctc", "at_greedy")
RERANKERS = ("at_teacher", "self")


@dataclass
class DecodeConfig:
    mode: str = "parallel_greedy"
    m: int = 1
    reranker: str = "self"
    max_len: int = 64
    batch_size: int = 128

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ContractError(f"unknown decode mode {self.mode!r}")
        if self.m < 1:
            raise ContractError("m must be at least 1")
        if self.mode == "npd" and self.reranker not in RERANKERS:
            raise ContractError(f"npd needs a reranker from {RERANKERS}")


@dataclass
class DecodeResult:
    tokens: list[int]
    decoder_pass_count: int
    length: int
    candidate_scores: list[float] = field(default_factory=list)
    candidate_lengths: list[int] = field(default_factory=list)
    score: float | None = None


def _parallel_logits(sources, lengths, params: M.ModelParams, enc: M.EncoderOutput | None = None):
    lengths = np.asarray(lengths, dtype=np.int64)
    with tn.no_grad():
        if enc is None:
            enc = M.encode_batch(sources, params)
        h = M.initial_decoder_inputs(enc, lengths, params)
        return M.decode_parallel(h, enc, params, M.target_mask(lengths)).data


def _self_scores(logits: np.ndarray, tokens: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Mean log-probability the model assigns to its own argmax tokens."""
    lsm = tn._log_softmax_np(logits)
    picked = np.take_along_axis(lsm, tokens[..., None], axis=-1)[..., 0]
    mask = M.target_mask(lengths)
    return (picked * mask).sum(axis=1) / lengths


def parallel_greedy_batch(sources, params: M.ModelParams, lengths=None) -> list[DecodeResult]:
    """One parallel pass per sentence; length defaults to the length head's argmax."""
    with tn.no_grad():
        enc = M.encode_batch(sources, params)
        if lengths is None:
            lengths = M.top_lengths(M.predict_length(enc, params), 1)[:, 0]
    lengths = np.asarray(lengths, dtype=np.int64)
    logits = _parallel_logits(sources, lengths, params, enc)
    tokens = M.argmax_tokens(logits)
    scores = _self_scores(logits, tokens, lengths)
    return [DecodeResult(tokens=[int(t) for t in tokens[b, :lengths[b]]], decoder_pass_count=1,
                         length=int(lengths[b]), score=float(scores[b]))
            for b in range(len(sources))]


def parallel_greedy_decode(x: Sequence[int], params: M.ModelParams, length: int | None = None) -> DecodeResult:
    return parallel_greedy_batch([x], params, None if length is None else [length])[0]


def npd_batch(sources, params: M.ModelParams, m: int, reranker: str = "self",
              teacher: M.ModelParams | None = None) -> list[DecodeResult]:
    """Decode the top-``m`` length candidates and keep the best-scoring output.

    Scores are mean per-token log-probabilities: under the AT teacher (with EOS)
    for ``at_teacher``, under the parallel model's own logits for ``self``.
    Ties go to the higher score, then the shorter length, then the
    lexicographically smaller output.
    """
    if reranker not in RERANKERS:
        raise ContractError(f"unknown reranker {reranker!r}")
    if reranker == "at_teacher" and teacher is None:
        raise ContractError("at_teacher reranking needs a teacher model")
    B = len(sources)
    with tn.no_grad():
        enc = M.encode_batch(sources, params)
        cands = M.top_lengths(M.predict_length(enc, params), m)
    per_cand: list[tuple[np.ndarray, list[list[int]], np.ndarray]] = []
    for j in range(cands.shape[1]):
        lengths = cands[:, j]
        logits = _parallel_logits(sources, lengths, params, enc)
        tokens = M.argmax_tokens(logits)
        outs = [[int(t) for t in tokens[b, :lengths[b]]] for b in range(B)]
        if reranker == "self":
            scores = _self_scores(logits, tokens, lengths)
        else:
            scores = M.at_score(sources, outs, teacher)
        per_cand.append((lengths, outs, scores))
    results = []
    for b in range(B):
        options = [(float(s[b]), int(ls[b]), o[b]) for ls, o, s in per_cand]
        best = min(options, key=lambda r: (-r[0], r[1], r[2]))
        results.append(DecodeResult(tokens=best[2], decoder_pass_count=len(options), length=best[1],
                                    candidate_scores=[r[0] for r in options],
                                    candidate_lengths=[r[1] for r in options], score=best[0]))
    return results


def npd_decode(x, params: M.ModelParams, m: int, reranker: str = "self",
               teacher: M.ModelParams | None = None) -> DecodeResult:
    return npd_batch([x], params, m, reranker, teacher)[0]


def ctc_batch(sources, params: M.ModelParams) -> list[DecodeResult]:
    """Decode ``2N`` frames in one pass and collapse repeats and blanks."""
    out_len = ctc_output_lengths(sources)
    logits = _parallel_logits(sources, out_len, params)
    frames = M.argmax_tokens(logits)
    res = []
    for b in range(len(sources)):
        toks = ctc_collapse(frames[b, :out_len[b]])
        res.append(DecodeResult(tokens=toks, decoder_pass_count=1, length=len(toks)))
    return res


def ctc_decode(x, params: M.ModelParams) -> DecodeResult:
    return ctc_batch([x], params)[0]


def at_greedy_batch(sources, params: M.ModelParams) -> list[DecodeResult]:
    outs = M.at_greedy_batch(sources, params)
    # one decoder invocation per emitted token
    return [DecodeResult(tokens=o, decoder_pass_count=len(o), length=len(o)) for o in outs]


def decode_corpus(sources: Sequence[Sequence[int]], params: M.ModelParams, cfg: DecodeConfig,
                  teacher: M.ModelParams | None = None) -> list[DecodeResult]:
    """Decode every source in batches of ``cfg.batch_size``."""
    cfg.validate()
    out: list[DecodeResult] = []
    for i in range(0, len(sources), cfg.batch_size):
        chunk = [list(s) for s in sources[i:i + cfg.batch_size]]
        if cfg.mode == "parallel_greedy":
            out.extend(parallel_greedy_batch(chunk, params))
        elif cfg.mode == "npd":
            out.extend(npd_batch(chunk, params, cfg.m, cfg.reranker, teacher))
        elif cfg.mode == "ctc":
            out.extend(ctc_batch(chunk, params))
        else:
            out.extend(at_greedy_batch(chunk, params))
    return out
