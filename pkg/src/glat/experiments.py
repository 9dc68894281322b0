"""Ablation sweeps: one training run per row, all rows sharing seeds and data."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .config import ExperimentConfig
from .decode import DecodeConfig
from .errors import ConfigError
from .report import evaluate
from .train import build_corpora, test_corpus, train

log = logging.getLogger(__name__)

NPD_M = 7


@dataclass
class SweepRow:
    label: str
    overrides: dict[str, str] = field(default_factory=dict)
    columns: dict[str, str] = field(default_factory=dict)   # extra table cells


@dataclass
class Sweep:
    name: str
    title: str
    rows: list[SweepRow]
    columns: list[str]
    with_npd: bool = False


def _fixed(lam) -> SweepRow:
    return SweepRow(f"fixed {lam}", {"objective": "glm", "glancing__schedule": "fixed_count",
                                     "glancing__ratio": str(lam)},
                    {"sampling": "Fixed", "lambda": str(lam)})


ADAPTIVE = SweepRow("adaptive", {"objective": "glm", "glancing__schedule": "constant"},
                    {"sampling": "Adaptive", "lambda": "-", "lambda_s": "-", "lambda_e": "-"})


def named_sweep(name: str, with_adaptive: bool = True) -> Sweep:
    """Predefined sweeps shaped like the fixed-ratio, decreasing-ratio,
    selection-strategy and input/sampling ablation tables."""
    extra = [ADAPTIVE] if with_adaptive else []
    if name == "fixed_ratio":
        rows = [_fixed(lam) for lam in (0.0, 0.1, 0.2, 0.3, 0.4)] + extra
        return Sweep(name, "Fixed sampling ratio", rows, ["sampling", "lambda", "bleu"])
    if name == "decreasing_ratio":
        rows = [SweepRow(f"decreasing 0.5->{e}",
                         {"objective": "glm", "glancing__schedule": "decreasing_count",
                          "glancing__ratio_start": "0.5", "glancing__ratio_end": str(e)},
                         {"sampling": "Decreasing", "lambda_s": "0.5", "lambda_e": str(e)})
                for e in (0.0, 0.1, 0.2, 0.3)] + extra
        return Sweep(name, "Decreasing sampling ratio", rows,
                     ["sampling", "lambda_s", "lambda_e", "bleu"])
    if name == "strategy":
        rows = [SweepRow(s, {"objective": "glm", "glancing__selection_strategy": s},
                         {"strategy": s})
                for s in ("random", "p_ref", "one_minus_p_ref", "most_certain", "most_uncertain")]
        return Sweep(name, "Reference word selection strategy", rows,
                     ["strategy", "bleu", "npd_bleu"], with_npd=True)
    if name == "inputs":
        rows = [
            SweepRow("uniform sampling", {"objective": "glm",
                                          "glancing__selection_strategy": "uniform_mlm"},
                     {"method": "GLAT w/ uniform sampling"}),
            SweepRow("mask inputs", {"objective": "glm", "glancing__input_mode": "mask_token"},
                     {"method": "GLAT w/ [MASK] inputs"}),
            SweepRow("glat", {"objective": "glm"}, {"method": "GLAT"}),
        ]
        return Sweep(name, "Sampling and decoder-input ablation", rows, ["method", "bleu"])
    raise ConfigError(f"unknown sweep {name!r}; choose from fixed_ratio, decreasing_ratio, "
                      "strategy, inputs")


def grid_sweep(spec: str) -> Sweep:
    """Sweep one field: ``section.key=v1,v2,...``."""
    if "=" not in spec:
        raise ConfigError(f"grid spec must look like section.key=v1,v2: {spec!r}")
    key, values = spec.split("=", 1)
    dotted = key.strip().replace(".", "__")
    rows = [SweepRow(f"{key}={v}", {dotted: v.strip()}, {key: v.strip()})
            for v in values.split(",") if v.strip()]
    if not rows:
        raise ConfigError("grid spec has no values")
    return Sweep("grid", f"Sweep over {key}", rows, [key, "bleu"])


def row_config(base: ExperimentConfig, row: SweepRow) -> ExperimentConfig:
    over = dict(row.overrides)
    objective = over.pop("objective", base.objective)
    cfg = base.replace(objective=objective, **over)
    if objective != "nat" and "glancing__ratio" not in over and base.objective == "nat":
        cfg.glancing.ratio = 0.5
    return cfg


def _run_row(args) -> dict:
    base, row, out_dir, with_npd = args
    cfg = row_config(base, row)
    cfg.validate()
    corpora = build_corpora(cfg)
    res = train(cfg, out_dir=out_dir, corpora=corpora, quiet=True)
    test = test_corpus(cfg)
    rep = evaluate(res.params, test, cfg.decode)
    record = {"label": row.label, **row.columns, "objective": cfg.objective,
              "bleu": rep["bleu"], "repetition_ratio": rep["repetition_ratio"],
              "exact_match": rep["exact_match"], "steps": cfg.optim.total_steps,
              "seed": cfg.run.seed, "seconds": res.seconds}
    if with_npd:
        npd = evaluate(res.params, test, DecodeConfig(mode="npd", m=NPD_M, reranker="self"))
        record["npd_bleu"] = npd["bleu"]
    record["metrics"] = res.metrics
    return record


def run_sweep(base: ExperimentConfig, sweep: Sweep, out_dir: str | Path | None = None,
              jobs: int = 1) -> list[dict]:
    """Train and evaluate every row; rows are independent and may run in separate processes."""
    tasks = []
    for i, row in enumerate(sweep.rows):
        sub = Path(out_dir) / f"{i:02d}_{row.label.replace(' ', '_').replace('>', '')}" \
            if out_dir is not None else None
        tasks.append((base, row, sub, sweep.with_npd))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_row, tasks))
    else:
        records = []
        for t in tasks:
            log.info("sweep row %s", t[1].label)
            records.append(_run_row(t))
    return records
