"""Glancing language model training.

A training step decodes once without recording gradients, measures how far
the argmax prediction is from the reference, reveals a number of reference
tokens proportional to that distance, and trains a second decoding pass to
predict the tokens that were not revealed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import model as M
from . import tensor as tn
from .errors import ContractError
from .tensor import Tensor
from .vocab import MASK

STRATEGIES = ("random", "p_ref", "one_minus_p_ref", "most_certain", "most_uncertain", "uniform_mlm")
METRICS = ("hamming", "levenshtein", "lcs")
SCHEDULES = ("constant", "linear", "fixed_count", "decreasing_count")
INPUT_MODES = ("encoder_copy", "mask_token")


@dataclass
class GlancingConfig:
    selection_strategy: str = "random"
    distance_metric: str = "hamming"
    schedule: str = "constant"
    ratio: float = 0.5          # lambda for constant / fixed_count
    ratio_start: float = 0.5    # lambda_s for linear / decreasing_count
    ratio_end: float = 0.3      # lambda_e
    input_mode: str = "encoder_copy"
    length_loss_weight: float = 0.1

    def validate(self) -> None:
        if self.selection_strategy not in STRATEGIES:
            raise ContractError(f"unknown selection strategy {self.selection_strategy!r}")
        if self.distance_metric not in METRICS:
            raise ContractError(f"unknown distance metric {self.distance_metric!r}")
        if self.schedule not in SCHEDULES:
            raise ContractError(f"unknown ratio schedule {self.schedule!r}")
        if self.input_mode not in INPUT_MODES:
            raise ContractError(f"unknown input mode {self.input_mode!r}")
        for name in ("ratio", "ratio_start", "ratio_end"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name}={v} outside [0, 1]")

    @property
    def proportional_to_length(self) -> bool:
        """Fixed/decreasing-count ablations reveal ``floor(lambda * T)`` tokens."""
        return self.schedule in ("fixed_count", "decreasing_count")


@dataclass
class GlanceOutcome:
    sampled_positions: np.ndarray
    first_pass_prediction: np.ndarray
    distance: int
    sampling_number: int

    def __post_init__(self):
        if len(self.sampled_positions) != self.sampling_number:
            raise ContractError("sampled position count differs from the sampling number")


# ---------------------------------------------------------------------------
# distances

def hamming_distance(y: Sequence[int], y_hat: Sequence[int]) -> int:
    if len(y) != len(y_hat):
        raise ContractError(f"hamming distance needs equal lengths, got {len(y)} and {len(y_hat)}")
    return int(np.count_nonzero(np.asarray(y) != np.asarray(y_hat)))


def levenshtein_distance(y: Sequence[int], y_hat: Sequence[int]) -> int:
    """Unit-cost edit distance."""
    prev = list(range(len(y_hat) + 1))
    for i, a in enumerate(y, 1):
        cur = [i]
        for j, b in enumerate(y_hat, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a != b)))
        prev = cur
    return prev[-1]


def lcs_length(y: Sequence[int], y_hat: Sequence[int]) -> int:
    prev = [0] * (len(y_hat) + 1)
    for a in y:
        cur = [0]
        for j, b in enumerate(y_hat, 1):
            cur.append(prev[j - 1] + 1 if a == b else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def lcs_distance(y: Sequence[int], y_hat: Sequence[int]) -> int:
    """``max(|y|, |y_hat|) - LCS(y, y_hat)``."""
    return max(len(y), len(y_hat)) - lcs_length(y, y_hat)


def distance(y, y_hat, metric: str = "hamming") -> int:
    if metric == "hamming":
        return hamming_distance(y, y_hat)
    if metric == "levenshtein":
        return levenshtein_distance(y, y_hat)
    if metric == "lcs":
        return lcs_distance(y, y_hat)
    raise ContractError(f"unknown distance metric {metric!r}")


# ---------------------------------------------------------------------------
# how many, and which

def sampling_number(y, y_hat, ratio: float, metric: str = "hamming") -> int:
    """``floor(ratio * d(y, y_hat))`` clamped to ``[0, len(y)]``."""
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"ratio {ratio} outside [0, 1]")
    return count_from_distance(distance(y, y_hat, metric), ratio, len(y))


def count_from_distance(d: int, ratio: float, T: int) -> int:
    # small epsilon keeps e.g. 0.3 * 10 from flooring to 2
    return int(min(max(math.floor(ratio * d + 1e-9), 0), T))


def ratio_schedule_value(cfg: GlancingConfig, step: int, total_steps: int) -> float:
    """Current sampling ratio; linear schedules interpolate start -> end."""
    if not 0 <= step <= max(total_steps, 0):
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if cfg.schedule in ("constant", "fixed_count"):
        return cfg.ratio
    frac = step / total_steps if total_steps > 0 else 1.0
    return cfg.ratio_start + (cfg.ratio_end - cfg.ratio_start) * frac


def _reference_scores(strategy: str, y, probs: np.ndarray | None) -> np.ndarray:
    T = len(y)
    if probs is None:
        raise ContractError(f"strategy {strategy!r} needs first-pass probabilities")
    probs = np.asarray(probs)[:T]
    if strategy in ("p_ref", "one_minus_p_ref"):
        p_ref = probs[np.arange(T), np.asarray(y)]
        return p_ref if strategy == "p_ref" else 1.0 - p_ref
    return probs.max(axis=-1)


def _weighted_without_replacement(weights: np.ndarray, S: int, rng: np.random.Generator) -> list[int]:
    w = np.clip(np.asarray(weights, dtype=float), 0.0, None).copy()
    chosen: list[int] = []
    for _ in range(S):
        total = w.sum()
        if total <= 0.0:
            # every remaining weight is zero: fall back to a uniform draw
            free = np.flatnonzero(~np.isin(np.arange(len(w)), chosen))
            pick = int(free[rng.integers(len(free))])
        else:
            pick = int(np.searchsorted(np.cumsum(w / total), rng.random(), side="right"))
            pick = min(pick, len(w) - 1)
            while w[pick] <= 0.0:
                pick -= 1
        chosen.append(pick)
        w[pick] = 0.0
    return chosen


def glancing_sample(y: Sequence[int], y_hat: Sequence[int] | None, S: int, strategy: str = "random",
                    first_pass_probs: np.ndarray | None = None,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Choose exactly ``S`` distinct positions of ``y`` to reveal (sorted)."""
    T = len(y)
    if not 0 <= S <= T:
        raise ContractError(f"sampling number {S} outside [0, {T}]")
    if S == 0:
        return np.zeros(0, dtype=np.int64)
    rng = rng if rng is not None else np.random.default_rng()
    if strategy in ("random", "uniform_mlm"):
        picked = random_positions(np.array([T]), np.array([S]), rng)[0]
        return np.flatnonzero(picked)
    scores = _reference_scores(strategy, y, first_pass_probs)
    if strategy in ("p_ref", "one_minus_p_ref"):
        return np.sort(np.asarray(_weighted_without_replacement(scores, S, rng), dtype=np.int64))
    if strategy == "most_certain":
        order = np.argsort(-scores, kind="stable")
    elif strategy == "most_uncertain":
        order = np.argsort(scores, kind="stable")
    else:
        raise ContractError(f"unknown selection strategy {strategy!r}")
    return np.sort(order[:S])


def random_positions(lengths: np.ndarray, counts: np.ndarray, rng: np.random.Generator,
                     width: int | None = None) -> np.ndarray:
    """[B, W] boolean masks with ``counts[b]`` uniformly chosen positions below ``lengths[b]``."""
    lengths = np.asarray(lengths)
    counts = np.asarray(counts)
    width = int(lengths.max()) if width is None else width
    keys = rng.random((len(lengths), width))
    keys[np.arange(width)[None, :] >= lengths[:, None]] = np.inf
    ranks = np.argsort(np.argsort(keys, axis=1, kind="stable"), axis=1, kind="stable")
    return ranks < counts[:, None]


# ---------------------------------------------------------------------------
# decoder input replacement

def replace_inputs(h: Tensor, targets, positions: np.ndarray, params: M.ModelParams,
                   input_mode: str = "encoder_copy") -> Tensor:
    """Swap rows of ``h`` at glanced positions for target-token embeddings.

    ``positions`` is a boolean mask shaped like ``targets`` ([B, T]).  In
    ``mask_token`` mode every non-glanced row becomes the MASK embedding.
    """
    targets = np.asarray(targets)
    positions = np.asarray(positions, dtype=bool)
    if input_mode == "encoder_copy":
        if not positions.any():
            return h
        return tn.where(positions[..., None], M.embed_tokens(params, targets), h)
    if input_mode == "mask_token":
        ids = np.where(positions, targets, MASK)
        return M.embed_tokens(params, ids)
    raise ContractError(f"unknown input mode {input_mode!r}")


# ---------------------------------------------------------------------------
# losses

@dataclass
class StepStats:
    loss: float = 0.0
    token_loss: float = 0.0
    length_loss: float = 0.0
    mean_distance: float = 0.0
    mean_glance_fraction: float = 0.0
    length_accuracy: float = 0.0
    outcomes: list[GlanceOutcome] = field(default_factory=list)
    logits: Tensor | None = field(default=None, repr=False)   # second-pass logits, kept for inspection


def masked_token_loss(logits: Tensor, targets: np.ndarray, weight: np.ndarray) -> Tensor:
    """Sum of token NLL at positions where ``weight`` is true, over their count."""
    ce = tn.cross_entropy(logits, targets)
    count = float(weight.sum())
    return tn.div(tn.sum_(tn.mul(ce, weight.astype(float))), max(count, 1.0))


def _with_length_loss(token_loss: Tensor, enc: M.EncoderOutput, params: M.ModelParams,
                      lengths, weight: float, stats: StepStats) -> Tensor:
    if weight <= 0:
        return token_loss
    ll = M.length_loss(enc, params, lengths)
    stats.length_loss = ll.item()
    with tn.no_grad():
        pred = M.length_logits(enc, params).data.argmax(axis=-1) + 1
    stats.length_accuracy = float(np.mean(pred == np.asarray(lengths)))
    return tn.add(token_loss, tn.mul(ll, weight))


def nat_loss_batch(sources, targets, params: M.ModelParams, ctx: M.Context = M.EVAL,
                   length_weight: float = 0.1) -> tuple[Tensor, StepStats]:
    """Vanilla NAT objective: one parallel pass, token mean cross-entropy."""
    stats = StepStats()
    y, mask, lengths = M.pad_batch(targets)
    enc = M.encode_batch(sources, params, ctx)
    h = M.initial_decoder_inputs(enc, lengths, params)
    logits = M.decode_parallel(h, enc, params, mask, ctx)
    stats.logits = logits
    tok = masked_token_loss(logits, y, mask)
    stats.token_loss = tok.item()
    loss = _with_length_loss(tok, enc, params, lengths, length_weight, stats)
    stats.loss = loss.item()
    return loss, stats


def nat_loss(pair, params: M.ModelParams, ctx: M.Context = M.EVAL, length_weight: float = 0.1) -> Tensor:
    return nat_loss_batch([pair.source], [pair.target], params, ctx, length_weight)[0]


def glm_loss_batch(sources, targets, params: M.ModelParams, cfg: GlancingConfig, ratio: float,
                   ctx: M.Context = M.EVAL, glance_rng: np.random.Generator | None = None,
                   force_count: int | None = None,
                   after_first_pass: Callable[[], None] | None = None) -> tuple[Tensor, StepStats]:
    """Two-pass glancing loss for a batch.

    ``force_count`` overrides the sampling number (used to check the
    degenerate S=0 and S=T cases).  ``after_first_pass`` is invoked right
    after the gradient-free decoding, before anything else happens.
    """
    glance_rng = glance_rng if glance_rng is not None else np.random.default_rng(0)
    stats = StepStats()
    y, mask, lengths = M.pad_batch(targets)
    B, T = y.shape
    enc = M.encode_batch(sources, params, ctx)
    h = M.initial_decoder_inputs(enc, lengths, params)

    with tn.no_grad():
        first = M.decode_parallel(h, enc, params, mask, M.EVAL).data
    if after_first_pass is not None:
        after_first_pass()
    y_hat = M.argmax_tokens(first)
    need_probs = cfg.selection_strategy not in ("random", "uniform_mlm")
    probs = np.exp(first - first.max(-1, keepdims=True)) if need_probs else None
    if probs is not None:
        probs /= probs.sum(-1, keepdims=True)

    counts = np.zeros(B, dtype=np.int64)
    dists = np.zeros(B, dtype=np.int64)
    for b in range(B):
        t_b = int(lengths[b])
        dists[b] = distance(targets[b], y_hat[b, :t_b], cfg.distance_metric)
        if force_count is not None:
            counts[b] = min(force_count, t_b)
        elif cfg.selection_strategy == "uniform_mlm":
            counts[b] = t_b - int(glance_rng.integers(1, t_b + 1))
        elif cfg.proportional_to_length:
            counts[b] = count_from_distance(t_b, ratio, t_b)
        else:
            counts[b] = count_from_distance(int(dists[b]), ratio, t_b)

    if cfg.selection_strategy in ("random", "uniform_mlm"):
        glanced = random_positions(lengths, counts, glance_rng, width=T)
    else:
        glanced = np.zeros((B, T), dtype=bool)
        for b in range(B):
            t_b = int(lengths[b])
            pos = glancing_sample(targets[b], y_hat[b, :t_b], int(counts[b]), cfg.selection_strategy,
                                  probs[b, :t_b], glance_rng)
            glanced[b, pos] = True

    for b in range(B):
        t_b = int(lengths[b])
        stats.outcomes.append(GlanceOutcome(np.flatnonzero(glanced[b, :t_b]), y_hat[b, :t_b].copy(),
                                            int(dists[b]), int(counts[b])))

    h2 = replace_inputs(h, y, glanced, params, cfg.input_mode)
    logits = M.decode_parallel(h2, enc, params, mask, ctx)
    stats.logits = logits
    tok = masked_token_loss(logits, y, mask & ~glanced)
    stats.token_loss = tok.item()
    stats.mean_distance = float(dists.mean())
    stats.mean_glance_fraction = float((counts / lengths).mean())
    loss = _with_length_loss(tok, enc, params, lengths, cfg.length_loss_weight, stats)
    stats.loss = loss.item()
    return loss, stats


def glm_train_step(pair, params: M.ModelParams, cfg: GlancingConfig, ratio: float,
                   ctx: M.Context = M.EVAL, glance_rng: np.random.Generator | None = None):
    """Single-sentence glancing loss; returns ``(loss, GlanceOutcome)``."""
    loss, stats = glm_loss_batch([pair.source], [pair.target], params, cfg, ratio, ctx, glance_rng)
    return loss, stats.outcomes[0]
