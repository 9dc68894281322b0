"""Command-line entry point: ``glat <command> [options]``.

Every ``ExperimentConfig`` field is exposed as ``--<section>.<key>``; a
config file given with ``--config`` is applied first. The only environment
variable consulted is ``GLAT_OUTPUT_DIR``, which overrides the output
directory of any command that writes one.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import model as M
from .checkpoint import average_checkpoints, load_checkpoint
from .config import OBJECTIVES, ExperimentConfig, default_config, fill_section
from .data import (SentencePair, distill_corpus, generate_corpus, read_corpus, read_sentences,
                   write_corpus, write_sentences)
from .decode import DecodeConfig, decode_corpus
from .errors import CheckpointError, ConfigError, ContractError, GlatError
from .experiments import grid_sweep, named_sweep, run_sweep
from .report import (evaluate, format_table, plot_length_buckets, plot_training_curves,
                     write_jsonl)
from .train import test_corpus, train

log = logging.getLogger("glat")

OUTPUT_ENV = "GLAT_OUTPUT_DIR"


def _output_dir(given: str | None, default: str) -> Path:
    env = os.environ.get(OUTPUT_ENV)
    return Path(env) if env else Path(given or default)


def _add_config_flags(p: argparse.ArgumentParser, sections=ExperimentConfig.SECTIONS) -> None:
    p.add_argument("--config", help="INI file with [experiment], [model], [task], ... sections")
    p.add_argument("--objective", choices=OBJECTIVES)
    p.add_argument("--preset", help="model preset (toy, tiny, iwslt, base)")
    proto = ExperimentConfig()
    for sec in sections:
        g = p.add_argument_group(sec)
        for f in fields(getattr(proto, sec)):
            g.add_argument(f"--{sec}.{f.name}", dest=f"{sec}__{f.name}", metavar=f.name.upper(),
                           help=f"default {getattr(getattr(proto, sec), f.name)!r}")


def config_from_args(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        if args.objective:
            cfg = cfg.replace(objective=args.objective)
    else:
        cfg = default_config(args.objective or "glm")
    if args.preset:
        cfg = cfg.replace(preset=args.preset)
        cfg.model = M.preset(args.preset)
    over = {k: v for k, v in vars(args).items()
            if "__" in k and v is not None and k.split("__")[0] in ExperimentConfig.SECTIONS}
    cfg = cfg.replace(**over) if over else cfg
    if "task__vocab_size" in over and "model__vocab_size" not in over:
        cfg.model.vocab_size = cfg.task.vocab_size
    if "task__max_len" in over and cfg.model.max_len < cfg.task.max_len:
        cfg.model.max_len = cfg.task.max_len
    cfg.validate()
    return cfg


def _emit(records, columns, title=None, jsonl: Path | None = None) -> None:
    for r in records:
        print(json.dumps({k: v for k, v in r.items() if k in columns or k == "label"}, sort_keys=True))
    print()
    print(format_table(records, columns, title=title))
    if jsonl is not None:
        write_jsonl(jsonl, records)


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    cfg = config_from_args(args)
    out = _output_dir(args.out, f"runs/{cfg.objective}")
    res = train(cfg, out_dir=out, resume=args.resume)
    valid = [r for r in res.metrics if r["type"] == "valid"]
    _emit(valid, ["step", "bleu"], title=f"validation BLEU ({cfg.objective})")
    fig = plot_training_curves({cfg.objective: res.metrics}, out / "training_curves.png")
    print(f"\ncheckpoint {res.final_checkpoint}; figure {fig}")
    if res.averaged_checkpoint:
        print(f"averaged {len(res.best)} best checkpoints -> {res.averaged_checkpoint}")
    return 0


def _load_eval_corpus(args, meta: dict) -> list[SentencePair]:
    if args.corpus:
        corpus, vocab = read_corpus(args.corpus)
        if vocab is not None and vocab != meta["model"]["vocab_size"]:
            raise CheckpointError(f"corpus vocab {vocab} != checkpoint vocab "
                                  f"{meta['model']['vocab_size']}")
        return corpus
    cfg = config_from_args(args)
    if cfg.task.vocab_size != meta["model"]["vocab_size"]:
        raise CheckpointError(f"task vocab {cfg.task.vocab_size} != checkpoint vocab "
                              f"{meta['model']['vocab_size']}")
    return test_corpus(cfg)


def _decode_cfg(args) -> DecodeConfig:
    over = {f.name: getattr(args, f"decode__{f.name}") for f in fields(DecodeConfig)
            if getattr(args, f"decode__{f.name}", None) is not None}
    cfg = fill_section(DecodeConfig(), over)
    try:
        cfg.validate()
    except ContractError as e:
        raise ConfigError(str(e)) from e
    return cfg


def cmd_evaluate(args) -> int:
    params, meta, _ = load_checkpoint(args.checkpoint)
    corpus = _load_eval_corpus(args, {"model": {"vocab_size": params.config.vocab_size}})
    dcfg = _decode_cfg(args)
    teacher = load_checkpoint(args.teacher)[0] if args.teacher else None
    rep = evaluate(params, corpus, dcfg, teacher, bucket_width=args.bucket_width)
    out = _output_dir(args.out, str(Path(args.checkpoint).parent / "eval"))
    summary = {k: v for k, v in rep.items() if k not in ("hypotheses", "buckets")}
    summary["type"] = "summary"
    summary["checkpoint"] = str(args.checkpoint)
    print(json.dumps(summary, sort_keys=True))
    for b in rep["buckets"]:
        print(json.dumps({"type": "bucket", **b}, sort_keys=True))
    print()
    print(format_table([summary], ["n", "bleu", "exact_match", "repetition_ratio", "i_dec",
                                   "length_accuracy"], floatfmt=".4f", title="evaluation"))
    print()
    print(format_table(rep["buckets"], ["bucket", "count", "bleu"], title="BLEU by source length"))
    write_jsonl(out / "report.jsonl", [summary] + [{"type": "bucket", **b} for b in rep["buckets"]])
    write_sentences(out / "hypotheses.txt", rep["hypotheses"], params.config.vocab_size)
    fig = plot_length_buckets({dcfg.mode: rep["buckets"]}, out / "length_buckets.png")
    print(f"\nreport {out / 'report.jsonl'}; figure {fig}")
    return 0


def cmd_decode(args) -> int:
    params, _, _ = load_checkpoint(args.checkpoint)
    sents, vocab = read_sentences(args.input)
    if vocab is not None and vocab != params.config.vocab_size:
        raise CheckpointError(f"input vocab {vocab} != checkpoint vocab {params.config.vocab_size}")
    dcfg = _decode_cfg(args)
    teacher = load_checkpoint(args.teacher)[0] if args.teacher else None
    results = decode_corpus(sents, params, dcfg, teacher)
    if args.output:
        write_sentences(args.output, [r.tokens for r in results], params.config.vocab_size)
    for r in results:
        print(json.dumps({"tokens": r.tokens, "length": r.length,
                          "decoder_pass_count": r.decoder_pass_count, "score": r.score}))
    return 0


def cmd_ablate(args) -> int:
    base = config_from_args(args)
    sweep = grid_sweep(args.grid) if args.grid else named_sweep(args.sweep, not args.no_adaptive)
    out = _output_dir(args.out, f"runs/ablate_{sweep.name}")
    records = run_sweep(base, sweep, out, jobs=args.jobs)
    rows = [{k: v for k, v in r.items() if k != "metrics"} for r in records]
    _emit(rows, ["label"] + sweep.columns + ["repetition_ratio"], title=sweep.title,
          jsonl=out / "table.jsonl")
    fig = plot_training_curves({r["label"]: r["metrics"] for r in records}, out / "training_curves.png")
    print(f"\ntable {out / 'table.jsonl'}; figure {fig}")
    return 0


def cmd_average(args) -> int:
    out = Path(os.environ.get(OUTPUT_ENV, "")) / Path(args.out).name \
        if os.environ.get(OUTPUT_ENV) else Path(args.out)
    averaged = average_checkpoints(args.checkpoints, out)
    print(json.dumps({"out": str(out), "inputs": args.checkpoints,
                      "parameters": averaged.n_parameters()}))
    return 0


def cmd_gen_corpus(args) -> int:
    cfg = config_from_args(args)
    prefix = _output_dir(None, ".") / args.prefix if os.environ.get(OUTPUT_ENV) else Path(args.prefix)
    corpus = generate_corpus(cfg.task.spec(), args.n, sample_seed=args.sample_seed)
    src, tgt = write_corpus(prefix, corpus, cfg.task.vocab_size)
    print(json.dumps({"pairs": len(corpus), "source": str(src), "target": str(tgt),
                      "transformation": cfg.task.transformation}))
    return 0


def cmd_distill(args) -> int:
    teacher, meta, _ = load_checkpoint(args.teacher)
    if not teacher.config.causal:
        raise CheckpointError(f"{args.teacher} is not an autoregressive checkpoint")
    corpus, vocab = read_corpus(args.corpus)
    if vocab is not None and vocab != teacher.config.vocab_size:
        raise CheckpointError(f"corpus vocab {vocab} != teacher vocab {teacher.config.vocab_size}")
    distilled = distill_corpus(corpus, teacher)
    prefix = _output_dir(None, ".") / args.out if os.environ.get(OUTPUT_ENV) else Path(args.out)
    src, tgt = write_corpus(prefix, distilled, teacher.config.vocab_size)
    changed = sum(a.target != b.target for a, b in zip(corpus, distilled))
    print(json.dumps({"pairs": len(distilled), "changed": changed, "source": str(src),
                      "target": str(tgt)}))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glat", description="Glancing Transformer toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    _add_config_flags(t)
    t.add_argument("--out", help=f"run directory (env {OUTPUT_ENV} overrides)")
    t.add_argument("--resume", help="last.npz of an earlier run")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on a corpus")
    _add_config_flags(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", help="corpus prefix (PREFIX.src / PREFIX.tgt); default: test split")
    e.add_argument("--teacher", help="AT checkpoint for reranker=at_teacher")
    e.add_argument("--bucket-width", type=int, default=3)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    d = sub.add_parser("decode", help="translate sentences from a file")
    _add_config_flags(d, ("decode",))
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--output")
    d.add_argument("--teacher")
    d.set_defaults(func=cmd_decode)

    a = sub.add_parser("ablate", help="run a sweep and print a comparison table")
    _add_config_flags(a)
    a.add_argument("--sweep", default="fixed_ratio",
                   choices=["fixed_ratio", "decreasing_ratio", "strategy", "inputs"])
    a.add_argument("--grid", help="custom sweep section.key=v1,v2,...")
    a.add_argument("--no-adaptive", action="store_true", help="omit the adaptive reference row")
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    v = sub.add_parser("average-checkpoints", help="element-wise mean of checkpoints")
    v.add_argument("checkpoints", nargs="+")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_average)

    g = sub.add_parser("gen-corpus", help="write a synthetic corpus")
    _add_config_flags(g, ("task",))
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--sample-seed", type=int)
    g.add_argument("--prefix", required=True)
    g.set_defaults(func=cmd_gen_corpus)

    s = sub.add_parser("distill", help="replace targets with an AT teacher's translations")
    s.add_argument("--teacher", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True, help="output corpus prefix")
    s.set_defaults(func=cmd_distill)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    if not hasattr(args, "objective"):
        args.objective = args.preset = args.config = None
    try:
        return args.func(args)
    except GlatError as e:
        print(f"glat: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
