"""Synthetic translation tasks, corpus files and evaluation metrics."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError
from .vocab import RESERVED

TRANSFORMATIONS = ("mapped_copy", "local_reorder", "expand_contract")


@dataclass(frozen=True)
class SentencePair:
    source: tuple[int, ...]
    target: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "source", tuple(int(t) for t in self.source))
        object.__setattr__(self, "target", tuple(int(t) for t in self.target))


@dataclass(frozen=True)
class SynthTaskSpec:
    vocab_size: int = 32
    min_len: int = 3
    max_len: int = 12
    transformation: str = "local_reorder"
    seed: int = 0
    identity_map: bool = False

    def validate(self) -> None:
        if self.vocab_size <= RESERVED + 1:
            raise ContractError(f"vocab_size must leave at least two payload ids above {RESERVED}")
        if not 1 <= self.min_len <= self.max_len:
            raise ContractError("need 1 <= min_len <= max_len")
        if self.transformation not in TRANSFORMATIONS:
            raise ContractError(f"unknown transformation {self.transformation!r}")

    @property
    def payload(self) -> np.ndarray:
        return np.arange(RESERVED, self.vocab_size)


class SynthTask:
    """Deterministic source -> target rule derived from the task seed."""

    def __init__(self, spec: SynthTaskSpec):
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 7919])
        ids = spec.payload
        self.perm = dict(zip(ids.tolist(),
                             (ids if spec.identity_map else rng.permutation(ids)).tolist()))
        self.second = dict(zip(ids.tolist(), rng.permutation(ids).tolist()))
        # token classes steering reordering / length change
        shuffled = rng.permutation(ids)
        q = max(1, len(ids) // 4)
        self.expand = set(shuffled[:q].tolist())
        self.drop = set(shuffled[q:2 * q].tolist())
        self.trigger = set(shuffled[:len(ids) // 2].tolist())

    def translate(self, x: Sequence[int]) -> list[int]:
        kind = self.spec.transformation
        mapped = [self.perm[t] for t in x]
        if kind == "mapped_copy":
            return mapped
        if kind == "local_reorder":
            return self._reorder(x, mapped)
        return self._expand_contract(x)

    def _reorder(self, x: Sequence[int], mapped: list[int]) -> list[int]:
        # an odd number of trigger tokens anywhere in the source swaps every
        # adjacent pair; the order of each pair depends on the whole sentence
        out = list(mapped)
        if sum(t in self.trigger for t in x) % 2 == 1:
            for i in range(0, len(out) - 1, 2):
                out[i], out[i + 1] = out[i + 1], out[i]
        return out

    def _expand_contract(self, x: Sequence[int]) -> list[int]:
        out: list[int] = []
        for t in x:
            if t in self.expand:
                out.extend((self.perm[t], self.second[t]))
            elif t in self.drop:
                continue
            else:
                out.append(self.perm[t])
        return out or [self.perm[x[0]]]


def generate_corpus(spec: SynthTaskSpec, n_pairs: int, sample_seed: int | None = None) -> list[SentencePair]:
    """``n_pairs`` random sources with their deterministic translations.

    The translation rule depends only on ``spec.seed``; ``sample_seed``
    (default ``spec.seed``) picks the sentences, so held-out splits share the
    rule but not the samples.
    """
    if n_pairs < 1:
        raise ContractError("n_pairs must be at least 1")
    task = SynthTask(spec)
    rng = np.random.default_rng([spec.seed if sample_seed is None else sample_seed, 104729])
    payload = spec.payload
    pairs = []
    for _ in range(n_pairs):
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        x = rng.choice(payload, size=n).tolist()
        pairs.append(SentencePair(x, task.translate(x)))
    return pairs


def sources(corpus: Sequence[SentencePair]) -> list[list[int]]:
    return [list(p.source) for p in corpus]


def targets(corpus: Sequence[SentencePair]) -> list[list[int]]:
    return [list(p.target) for p in corpus]


def distill_corpus(corpus: Sequence[SentencePair], teacher, batch_size: int = 128) -> list[SentencePair]:
    """Replace every target with the AT teacher's greedy translation of its source."""
    from .model import at_greedy_batch

    out: list[SentencePair] = []
    for i in range(0, len(corpus), batch_size):
        chunk = corpus[i:i + batch_size]
        hyps = at_greedy_batch([list(p.source) for p in chunk], teacher)
        for p, h in zip(chunk, hyps):
            # an empty teacher output would not be a valid pair; keep the reference
            out.append(SentencePair(p.source, h if h else p.target))
    return out


# ---------------------------------------------------------------------------
# corpus files

def write_corpus(prefix: str | Path, corpus: Sequence[SentencePair], vocab_size: int) -> tuple[Path, Path]:
    """Write ``prefix.src`` and ``prefix.tgt``; each starts with a vocab header line."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = (prefix.with_name(prefix.name + ".src"), prefix.with_name(prefix.name + ".tgt"))
    for path, side in zip(paths, ("source", "target")):
        write_sentences(path, [getattr(p, side) for p in corpus], vocab_size)
    return paths


def write_sentences(path: str | Path, sentences: Iterable[Sequence[int]], vocab_size: int) -> None:
    with open(path, "w") as f:
        f.write(f"# vocab_size={vocab_size}\n")
        for s in sentences:
            f.write(" ".join(str(int(t)) for t in s) + "\n")


def read_sentences(path: str | Path) -> tuple[list[list[int]], int | None]:
    vocab = None
    sents = []
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if line.startswith("#"):
                if "vocab_size=" in line:
                    vocab = int(line.split("vocab_size=")[1].split()[0])
                continue
            sents.append([int(t) for t in line.split()])
    return sents, vocab


def read_corpus(prefix: str | Path) -> tuple[list[SentencePair], int | None]:
    prefix = Path(prefix)
    src, v1 = read_sentences(prefix.with_name(prefix.name + ".src"))
    tgt, v2 = read_sentences(prefix.with_name(prefix.name + ".tgt"))
    if len(src) != len(tgt):
        raise ContractError(f"{prefix}: {len(src)} sources but {len(tgt)} targets")
    if v1 is not None and v2 is not None and v1 != v2:
        raise ContractError(f"{prefix}: vocab header mismatch ({v1} vs {v2})")
    return [SentencePair(s, t) for s, t in zip(src, tgt)], v1 if v1 is not None else v2


# ---------------------------------------------------------------------------
# metrics

def _ngrams(seq: Sequence[int], n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu_stats(hypotheses: Sequence[Sequence[int]], references: Sequence[Sequence[int]], max_n: int = 4):
    """(matches[n], totals[n], hyp_len, ref_len) summed over the corpus."""
    if len(hypotheses) != len(references):
        raise ContractError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hypotheses, references):
        h, r = list(h), list(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def bleu(hypotheses: Sequence[Sequence[int]], references: Sequence[Sequence[int]], max_n: int = 4) -> float:
    """Corpus BLEU in [0, 100] with brevity penalty.

    An order ``n >= 2`` with no matching n-gram uses ``1 / (total_n + 1)`` as
    its precision instead of zero.
    """
    matches, totals, hyp_len, ref_len = bleu_stats(hypotheses, references, max_n)
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_n):
        if matches[n] > 0:
            p = matches[n] / totals[n]
        else:
            p = 1.0 / (totals[n] + 1.0)
        log_p += math.log(p) / max_n
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def repetition_ratio(corpus: Sequence[Sequence[int]]) -> float:
    """Fraction of tokens equal to their immediate predecessor in the same sentence."""
    repeats = total = 0
    for s in corpus:
        s = list(s)
        total += len(s)
        repeats += sum(1 for a, b in zip(s, s[1:]) if a == b)
    return repeats / total if total else 0.0


def exact_match(hypotheses, references) -> float:
    if not hypotheses:
        return 0.0
    return float(np.mean([list(h) == list(r) for h, r in zip(hypotheses, references)]))


def length_bucket_eval(hypotheses, references, sources_, bucket_width: int) -> list[dict]:
    """Corpus BLEU per source-length interval ``[lo, hi]`` of width ``bucket_width``.

    Buckets run from length 1 up to the longest source; empty buckets carry
    ``count == 0`` and ``bleu is None``.
    """
    if bucket_width < 1:
        raise ContractError("bucket_width must be positive")
    if not len(hypotheses) == len(references) == len(sources_):
        raise ContractError("hypotheses, references and sources must align")
    longest = max((len(s) for s in sources_), default=0)
    n_buckets = max(1, math.ceil(longest / bucket_width))
    rows = []
    for k in range(n_buckets):
        lo, hi = k * bucket_width + 1, (k + 1) * bucket_width
        idx = [i for i, s in enumerate(sources_) if lo <= len(s) <= hi]
        score = bleu([hypotheses[i] for i in idx], [references[i] for i in idx]) if idx else None
        rows.append({"bucket": f"{lo}-{hi}", "lo": lo, "hi": hi, "count": len(idx), "bleu": score})
    return rows
