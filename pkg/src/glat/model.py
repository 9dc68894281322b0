"""Transformer encoder, parallel decoder, causal decoder and length head.

All computations are batched: sequences are right-padded and carried
together with boolean masks.  Single-sentence helpers wrap the batched
functions with a batch of one.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .errors import ContractError
from .tensor import Tensor
from .vocab import BOS, EOS, LENGTH, MASK, PAD, RESERVED

log = logging.getLogger(__name__)

NEG_INF = -1e9


@dataclass
class ModelConfig:
    vocab_size: int = 32
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    max_len: int = 64
    dropout: float = 0.1
    positional: str = "learned"          # learned | sinusoidal
    copy_mode: str = "uniform"           # uniform | soft
    soft_copy_tau: float = 1.0
    decoder_input: str = "encoder_copy"  # encoder_copy | mask_token
    causal: bool = False                 # True for the autoregressive teacher

    @property
    def max_positions(self) -> int:
        # CTC decodes to twice the source length
        return 2 * self.max_len + 2

    def validate(self) -> None:
        if self.vocab_size <= RESERVED:
            raise ContractError(f"vocab_size must exceed the {RESERVED} reserved ids")
        if self.d_model % self.n_heads:
            raise ContractError("d_model must be divisible by n_heads")
        if self.positional not in ("learned", "sinusoidal"):
            raise ContractError(f"unknown positional encoding {self.positional!r}")
        if self.copy_mode not in ("uniform", "soft"):
            raise ContractError(f"unknown copy mode {self.copy_mode!r}")
        if self.decoder_input not in ("encoder_copy", "mask_token"):
            raise ContractError(f"unknown decoder input {self.decoder_input!r}")


PRESETS = {
    "toy": dict(d_model=64, n_heads=4, d_ff=128, enc_layers=2, dec_layers=2, max_len=64),
    "tiny": dict(d_model=32, n_heads=2, d_ff=64, enc_layers=1, dec_layers=1, max_len=32),
    "iwslt": dict(d_model=256, n_heads=4, d_ff=1024, enc_layers=5, dec_layers=5, max_len=256),
    "base": dict(d_model=512, n_heads=8, d_ff=2048, enc_layers=6, dec_layers=6, max_len=256),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ContractError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


def _sinusoid(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named(self) -> dict[str, Tensor]:
        return self.tensors

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if t.requires_grad}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(ModelConfig(**asdict(self.config)),
                           {k: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k)
                            for k, t in self.tensors.items()})

    def n_parameters(self) -> int:
        return sum(t.size for t in self.trainable().values())


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Randomly initialise every parameter; deterministic in ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    d, f, V = config.d_model, config.d_ff, config.vocab_size
    P = config.max_positions
    t: dict[str, Tensor] = {}

    def param(name, arr, trainable=True):
        t[name] = Tensor(arr, requires_grad=trainable, name=name)

    def lin(name, fan_in, fan_out):
        param(name, rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)))

    def ln(name):
        param(name + ".g", np.ones(d))
        param(name + ".b", np.zeros(d))

    def attn(name):
        for w in ("wq", "wk", "wv", "wo"):
            lin(f"{name}.{w}", d, d)

    def ffn(name):
        lin(name + ".w1", d, f)
        param(name + ".b1", np.zeros(f))
        lin(name + ".w2", f, d)
        param(name + ".b2", np.zeros(d))

    param("embed", rng.normal(0.0, d ** -0.5, size=(V, d)))
    if config.positional == "learned":
        param("pos_enc", rng.normal(0.0, 0.5, size=(P, d)))
        param("pos_dec", rng.normal(0.0, 0.5, size=(P, d)))
    else:
        param("pos_enc", _sinusoid(P, d), trainable=False)
        param("pos_dec", _sinusoid(P, d), trainable=False)
    for i in range(config.enc_layers):
        ln(f"enc.{i}.ln1"); attn(f"enc.{i}.self"); ln(f"enc.{i}.ln2"); ffn(f"enc.{i}.ff")
    ln("enc.ln_f")
    for i in range(config.dec_layers):
        ln(f"dec.{i}.ln1"); attn(f"dec.{i}.self")
        ln(f"dec.{i}.ln2"); attn(f"dec.{i}.cross")
        ln(f"dec.{i}.ln3"); ffn(f"dec.{i}.ff")
    ln("dec.ln_f")
    lin("length.w", d, config.max_len)
    param("length.b", np.zeros(config.max_len))
    return ModelParams(config, t)


# ---------------------------------------------------------------------------
# batching helpers

def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD, width: int | None = None):
    """Right-pad integer sequences; returns (ids [B, W], mask [B, W], lengths [B])."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    width = int(lengths.max()) if width is None else width
    ids = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
    mask = np.arange(width)[None, :] < lengths[:, None]
    return ids, mask, lengths


@dataclass
class EncoderOutput:
    states: Tensor            # [B, N, d] source positions only
    length_repr: Tensor       # [B, d] representation at the LENGTH position
    mask: np.ndarray          # [B, N] true at real source positions
    lengths: np.ndarray       # [B]

    def full(self) -> Tensor:
        """LENGTH position followed by the source positions: [B, N+1, d]."""
        return tn.concat([tn.reshape(self.length_repr, (self.length_repr.shape[0], 1, -1)),
                          self.states], axis=1)

    def detach(self) -> "EncoderOutput":
        return EncoderOutput(self.states.detach(), self.length_repr.detach(), self.mask, self.lengths)


class Context:
    """Dropout switch and random source for one forward computation."""

    def __init__(self, training: bool = False, rng: np.random.Generator | None = None,
                 rate: float = 0.0):
        self.training = training and rng is not None and rate > 0
        self.rng = rng
        self.rate = rate

    def drop(self, x: Tensor) -> Tensor:
        return tn.dropout(x, self.rate, self.rng, self.training)


EVAL = Context()


def embed_tokens(params: ModelParams, ids) -> Tensor:
    """Token embeddings from the shared softmax matrix, scaled by sqrt(d)."""
    d = params.config.d_model
    return tn.mul(tn.embedding(params["embed"], ids), math.sqrt(d))


def _layer_norm(params: ModelParams, name: str, x: Tensor) -> Tensor:
    return tn.layer_norm(x, params[name + ".g"], params[name + ".b"])


def _attention(params: ModelParams, name: str, xq: Tensor, xkv: Tensor, bias: np.ndarray,
               ctx: Context) -> Tensor:
    cfg = params.config
    B, Lq, d = xq.shape
    Lk = xkv.shape[1]
    H = cfg.n_heads
    dh = d // H
    q = tn.transpose(tn.reshape(xq @ params[name + ".wq"], (B, Lq, H, dh)), (0, 2, 1, 3))
    k = tn.transpose(tn.reshape(xkv @ params[name + ".wk"], (B, Lk, H, dh)), (0, 2, 3, 1))
    v = tn.transpose(tn.reshape(xkv @ params[name + ".wv"], (B, Lk, H, dh)), (0, 2, 1, 3))
    scores = tn.add(tn.mul(q @ k, 1.0 / math.sqrt(dh)), bias)
    att = ctx.drop(tn.softmax(scores, axis=-1))
    out = tn.reshape(tn.transpose(att @ v, (0, 2, 1, 3)), (B, Lq, d))
    return out @ params[name + ".wo"]


def _ffn(params: ModelParams, name: str, x: Tensor, ctx: Context) -> Tensor:
    h = tn.relu(tn.add(x @ params[name + ".w1"], params[name + ".b1"]))
    return tn.add(ctx.drop(h) @ params[name + ".w2"], params[name + ".b2"])


def _key_bias(mask: np.ndarray) -> np.ndarray:
    """[B, 1, 1, Lk] additive bias hiding padded keys."""
    return np.where(mask, 0.0, NEG_INF)[:, None, None, :]


# ---------------------------------------------------------------------------
# encoder

def encode_batch(sources: Sequence[Sequence[int]], params: ModelParams,
                 ctx: Context = EVAL) -> EncoderOutput:
    """Pre-norm transformer encoder over ``[LENGTH] + x`` for every source."""
    cfg = params.config
    if any(len(s) == 0 for s in sources):
        raise ContractError("cannot encode an empty source sentence")
    if any(len(s) > cfg.max_len for s in sources):
        raise ContractError(f"source longer than max_len={cfg.max_len}")
    ids, mask, lengths = pad_batch([[LENGTH, *s] for s in sources])
    L = ids.shape[1]
    x = tn.add(embed_tokens(params, ids), params["pos_enc"][:L])
    x = ctx.drop(x)
    bias = _key_bias(mask)
    for i in range(cfg.enc_layers):
        p = f"enc.{i}"
        h = _layer_norm(params, p + ".ln1", x)
        x = tn.add(x, ctx.drop(_attention(params, p + ".self", h, h, bias, ctx)))
        x = tn.add(x, ctx.drop(_ffn(params, p + ".ff", _layer_norm(params, p + ".ln2", x), ctx)))
    x = _layer_norm(params, "enc.ln_f", x)
    return EncoderOutput(states=x[:, 1:, :], length_repr=x[:, 0, :], mask=mask[:, 1:],
                         lengths=lengths - 1)


def encode(x: Sequence[int], params: ModelParams, ctx: Context = EVAL) -> EncoderOutput:
    return encode_batch([x], params, ctx)


# ---------------------------------------------------------------------------
# decoder inputs

def copy_weights(src_lengths: Sequence[int], tgt_lengths: Sequence[int], mode: str = "uniform",
                 tau: float = 1.0, width: int | None = None) -> np.ndarray:
    """[B, T, N] weights mapping encoder positions to decoder inputs.

    Uniform copy takes row ``floor(t * N / T)``; soft copy weights row ``n``
    by ``softmax_n(-|t * N / T - n| / tau)``.
    """
    src_lengths = np.asarray(src_lengths)
    tgt_lengths = np.asarray(tgt_lengths)
    B = len(src_lengths)
    N = int(src_lengths.max())
    T = int(tgt_lengths.max()) if width is None else width
    W = np.zeros((B, T, N))
    for b in range(B):
        n_b, t_b = int(src_lengths[b]), int(tgt_lengths[b])
        t = np.arange(t_b)
        if mode == "uniform":
            W[b, t, (t * n_b) // t_b] = 1.0
        elif mode == "soft":
            dist = -np.abs(t[:, None] * n_b / t_b - np.arange(n_b)[None, :]) / tau
            dist -= dist.max(axis=1, keepdims=True)
            e = np.exp(dist)
            W[b, :t_b, :n_b] = e / e.sum(axis=1, keepdims=True)
        else:
            raise ContractError(f"unknown copy mode {mode!r}")
    return W


def copy_decoder_inputs(enc: EncoderOutput, tgt_lengths, mode: str | None = None,
                        params: ModelParams | None = None, tau: float | None = None) -> Tensor:
    """Decoder inputs [B, T, d] copied from encoder states for each target length."""
    tgt_lengths = np.atleast_1d(np.asarray(tgt_lengths, dtype=np.int64))
    if tgt_lengths.min() < 1:
        raise ContractError("target length must be at least 1")
    if mode is None:
        mode = params.config.copy_mode if params is not None else "uniform"
    if tau is None:
        tau = params.config.soft_copy_tau if params is not None else 1.0
    W = copy_weights(enc.lengths, tgt_lengths, mode, tau)
    return tn.matmul(W, enc.states)


def initial_decoder_inputs(enc: EncoderOutput, tgt_lengths, params: ModelParams) -> Tensor:
    """Decoder inputs for the first (and, at inference, only) parallel pass."""
    cfg = params.config
    tgt_lengths = np.atleast_1d(np.asarray(tgt_lengths, dtype=np.int64))
    if cfg.decoder_input == "mask_token":
        ids = np.full((len(tgt_lengths), int(tgt_lengths.max())), MASK, dtype=np.int64)
        return embed_tokens(params, ids)
    return copy_decoder_inputs(enc, tgt_lengths, params=params)


# ---------------------------------------------------------------------------
# decoders

def _decoder_stack(params: ModelParams, x: Tensor, enc: EncoderOutput, self_bias: np.ndarray,
                   ctx: Context) -> Tensor:
    cfg = params.config
    T = x.shape[1]
    x = ctx.drop(tn.add(x, params["pos_dec"][:T]))
    cross_bias = _key_bias(enc.mask)
    for i in range(cfg.dec_layers):
        p = f"dec.{i}"
        h = _layer_norm(params, p + ".ln1", x)
        x = tn.add(x, ctx.drop(_attention(params, p + ".self", h, h, self_bias, ctx)))
        h = _layer_norm(params, p + ".ln2", x)
        x = tn.add(x, ctx.drop(_attention(params, p + ".cross", h, enc.states, cross_bias, ctx)))
        x = tn.add(x, ctx.drop(_ffn(params, p + ".ff", _layer_norm(params, p + ".ln3", x), ctx)))
    x = _layer_norm(params, "dec.ln_f", x)
    return x @ tn.transpose(params["embed"], (1, 0))


def decode_parallel(h: Tensor, enc: EncoderOutput, params: ModelParams,
                    tgt_mask: np.ndarray | None = None, ctx: Context = EVAL) -> Tensor:
    """Logits [B, T, V]; self-attention is bidirectional over the T positions."""
    B, T = h.shape[0], h.shape[1]
    if tgt_mask is None:
        tgt_mask = np.ones((B, T), dtype=bool)
    return _decoder_stack(params, h, enc, _key_bias(tgt_mask), ctx)


def target_mask(tgt_lengths) -> np.ndarray:
    tgt_lengths = np.atleast_1d(np.asarray(tgt_lengths))
    return np.arange(int(tgt_lengths.max()))[None, :] < tgt_lengths[:, None]


# ---------------------------------------------------------------------------
# length prediction

def length_logits(enc: EncoderOutput, params: ModelParams) -> Tensor:
    """[B, max_len] logits; class ``k`` stands for length ``k + 1``."""
    return tn.add(enc.length_repr @ params["length.w"], params["length.b"])


def predict_length(enc: EncoderOutput, params: ModelParams) -> np.ndarray:
    """Categorical distribution over lengths 1..max_len, one row per sentence."""
    with tn.no_grad():
        return tn.softmax(length_logits(enc, params), axis=-1).data


def top_lengths(dist: np.ndarray, m: int) -> np.ndarray:
    """[B, m'] most probable lengths (m' = min(m, classes)); ties favour shorter lengths."""
    m = min(m, dist.shape[-1])
    order = np.argsort(-dist, axis=-1, kind="stable")[:, :m]
    return order + 1


def length_loss(enc: EncoderOutput, params: ModelParams, tgt_lengths) -> Tensor:
    """Mean cross-entropy of the length head against the true target lengths."""
    L = params.config.max_len
    tgt = np.asarray(tgt_lengths, dtype=np.int64)
    if tgt.max() > L:
        log.warning("target length %d exceeds max_len=%d; clamping", int(tgt.max()), L)
    cls = np.clip(tgt, 1, L) - 1
    return tn.mean(tn.cross_entropy(length_logits(enc, params), cls))


# ---------------------------------------------------------------------------
# autoregressive decoder

def _causal_bias(mask: np.ndarray) -> np.ndarray:
    T = mask.shape[1]
    causal = np.tril(np.ones((T, T), dtype=bool))
    allowed = causal[None, :, :] & mask[:, None, :]
    return np.where(allowed, 0.0, NEG_INF)[:, None, :, :]


def at_logits(params: ModelParams, enc: EncoderOutput, prefixes: Sequence[Sequence[int]],
              ctx: Context = EVAL) -> Tensor:
    """Causal decoder logits [B, L, V]; position t sees prefix tokens 0..t only."""
    ids, mask, _ = pad_batch(prefixes)
    x = embed_tokens(params, ids)
    return _decoder_stack(params, x, enc, _causal_bias(mask), ctx)


def at_loss_batch(sources, targets, params: ModelParams, ctx: Context = EVAL,
                  with_length: bool = False) -> Tensor:
    """Mean per-token NLL of ``y + [EOS]`` under left-to-right teacher forcing."""
    enc = encode_batch(sources, params, ctx)
    prefixes = [[BOS, *y] for y in targets]
    gold, mask, _ = pad_batch([[*y, EOS] for y in targets])
    logits = at_logits(params, enc, prefixes, ctx)
    ce = tn.cross_entropy(logits, gold)
    loss = tn.div(tn.sum_(tn.mul(ce, mask.astype(float))), float(mask.sum()))
    if with_length:
        loss = tn.add(loss, tn.mul(length_loss(enc, params, [len(y) for y in targets]), 0.1))
    return loss


def at_loss(x: Sequence[int], y: Sequence[int], params: ModelParams, ctx: Context = EVAL) -> Tensor:
    return at_loss_batch([x], [y], params, ctx)


def at_score(sources, candidates, params: ModelParams) -> np.ndarray:
    """Mean per-token log-probability of each ``candidate + [EOS]`` under the AT model."""
    with tn.no_grad():
        enc = encode_batch(sources, params)
        logits = at_logits(params, enc, [[BOS, *c] for c in candidates])
        gold, mask, _ = pad_batch([[*c, EOS] for c in candidates])
        ll = -tn.cross_entropy(logits, gold).data
    return (ll * mask).sum(axis=1) / mask.sum(axis=1)


def at_greedy_batch(sources, params: ModelParams, max_steps: int | None = None):
    """Greedy left-to-right decoding; returns (outputs, steps_run)."""
    cfg = params.config
    B = len(sources)
    if max_steps is None:
        max_steps = min(cfg.max_positions - 1, 2 * max(len(s) for s in sources) + 10)
    out: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    with tn.no_grad():
        enc = encode_batch(sources, params)
        for _ in range(max_steps):
            logits = at_logits(params, enc, [[BOS, *o] for o in out]).data
            pos = np.array([len(o) for o in out])
            nxt = logits[np.arange(B), pos].argmax(axis=-1)
            for b in range(B):
                if done[b]:
                    continue
                if nxt[b] == EOS:
                    done[b] = True
                else:
                    out[b].append(int(nxt[b]))
            if done.all():
                break
    return out


def argmax_tokens(logits: np.ndarray) -> np.ndarray:
    """Per-position argmax; ties resolve to the lowest token id."""
    return logits.argmax(axis=-1)
