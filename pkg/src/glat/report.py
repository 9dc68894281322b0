"""Evaluation reports, plain-text tables and figures."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import model as M
from .data import SentencePair, bleu, exact_match, length_bucket_eval, repetition_ratio
from .decode import DecodeConfig, DecodeResult, decode_corpus

BUCKET_WIDTH = 3


def length_accuracy(params: M.ModelParams, sources, targets, batch_size: int = 256) -> float:
    """Fraction of sentences whose argmax predicted length equals the reference length."""
    hits = 0
    for i in range(0, len(sources), batch_size):
        chunk = [list(s) for s in sources[i:i + batch_size]]
        enc = M.encode_batch(chunk, params)
        pred = M.top_lengths(M.predict_length(enc, params), 1)[:, 0]
        gold = np.array([len(t) for t in targets[i:i + batch_size]])
        hits += int((pred == gold).sum())
    return hits / len(sources) if len(sources) else 0.0


def summarize(hypotheses, references, sources_, passes: Sequence[int] | None = None,
              bucket_width: int = BUCKET_WIDTH) -> dict:
    """Corpus-level metrics for already decoded output."""
    passes = list(passes) if passes is not None else [1] * len(hypotheses)
    return {
        "n": len(hypotheses),
        "bleu": bleu(hypotheses, references),
        "exact_match": exact_match(hypotheses, references),
        "repetition_ratio": repetition_ratio(hypotheses),
        "reference_repetition_ratio": repetition_ratio(references),
        # average decoder invocations per sentence
        "i_dec": float(np.mean(passes)) if passes else 0.0,
        "max_i_dec": int(max(passes)) if passes else 0,
        "buckets": length_bucket_eval(hypotheses, references, sources_, bucket_width),
    }


def evaluate(params: M.ModelParams, corpus: Sequence[SentencePair], cfg: DecodeConfig,
             teacher: M.ModelParams | None = None, bucket_width: int = BUCKET_WIDTH) -> dict:
    srcs = [list(p.source) for p in corpus]
    refs = [list(p.target) for p in corpus]
    results: list[DecodeResult] = decode_corpus(srcs, params, cfg, teacher)
    hyps = [r.tokens for r in results]
    rep = summarize(hyps, refs, srcs, [r.decoder_pass_count for r in results], bucket_width)
    rep["mode"] = cfg.mode
    rep["m"] = cfg.m if cfg.mode == "npd" else 1
    # CTC output length is fixed by the source and AT stops at EOS; only
    # the length-head modes have a length prediction to score
    rep["length_accuracy"] = (length_accuracy(params, srcs, refs)
                              if cfg.mode in ("parallel_greedy", "npd") else None)
    rep["hypotheses"] = hyps
    return rep


# ---------------------------------------------------------------------------
# text output

def _cell(v, floatfmt: str) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return format(v, floatfmt)
    return str(v)


def format_table(rows: Sequence[Mapping], columns: Sequence[str], floatfmt: str = ".2f",
                 title: str | None = None) -> str:
    cells = [[_cell(r.get(c), floatfmt) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    line = "  ".join(c.ljust(w) for c, w in zip(columns, widths))
    out = [title] if title else []
    out += [line, "  ".join("-" * w for w in widths)]
    out += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(out)


def write_jsonl(path: str | Path, records: Sequence[Mapping]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# figures

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_length_buckets(series: Mapping[str, Sequence[Mapping]], path: str | Path,
                        title: str = "BLEU by source length") -> Path:
    """Grouped bars of per-bucket BLEU, one group per source-length interval."""
    plt = _pyplot()
    names = list(series)
    labels = [r["bucket"] for r in series[names[0]]]
    x = np.arange(len(labels))
    width = 0.8 / max(len(names), 1)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for k, name in enumerate(names):
        vals = [r["bleu"] if r["bleu"] is not None else 0.0 for r in series[name]]
        ax.bar(x + (k - (len(names) - 1) / 2) * width, vals, width, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(labels)
    ax.set_xlabel("source length")
    ax.set_ylabel("BLEU")
    ax.set_title(title)
    ax.grid(True, axis="y", alpha=0.3)
    ax.legend(loc="best", frameon=False)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_training_curves(runs: Mapping[str, Sequence[Mapping]], path: str | Path) -> Path:
    """Training loss and validation BLEU against step for each run's metrics log."""
    plt = _pyplot()
    fig, (ax_l, ax_b) = plt.subplots(1, 2, figsize=(9, 3.5))
    for name, records in runs.items():
        tr = [r for r in records if r.get("type") == "train"]
        va = [r for r in records if r.get("type") == "valid"]
        if tr:
            ax_l.plot([r["step"] for r in tr], [r["loss"] for r in tr], label=name)
        if va:
            ax_b.plot([r["step"] for r in va], [r["bleu"] for r in va], marker="o", label=name)
    ax_l.set_xlabel("step")
    ax_l.set_ylabel("training loss")
    ax_l.set_yscale("log")
    ax_b.set_xlabel("step")
    ax_b.set_ylabel("validation BLEU")
    for ax in (ax_l, ax_b):
        ax.grid(True, alpha=0.3)
        ax.legend(loc="best", frameon=False)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path
