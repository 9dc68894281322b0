"""Training loop, learning-rate schedules and validation/checkpoint policy."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import model as M
from . import tensor as tn
from .checkpoint import average_checkpoints, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .ctc import glat_ctc_loss_batch
from .data import SentencePair, bleu, distill_corpus, generate_corpus, read_corpus
from .decode import decode_corpus
from .errors import ConfigError
from .glm import StepStats, glm_loss_batch, nat_loss_batch, ratio_schedule_value

log = logging.getLogger(__name__)

VALID_SEED_OFFSET = 1000
TEST_SEED_OFFSET = 2000


def learning_rate(cfg: ExperimentConfig, step: int) -> float:
    """Learning rate for 1-based ``step``."""
    o = cfg.optim
    step = max(step, 1)
    if o.lr_policy == "inverse_sqrt":
        warm = max(o.warmup_steps, 1)
        return o.lr * min(step / warm, math.sqrt(warm / step))
    if o.lr_policy == "linear":
        frac = min(step / o.total_steps, 1.0)
        return o.lr + (o.lr_end - o.lr) * frac
    return o.lr


def model_config_for(cfg: ExperimentConfig) -> M.ModelConfig:
    mc = dataclasses.replace(cfg.model, vocab_size=cfg.task.vocab_size,
                             decoder_input=cfg.glancing.input_mode,
                             causal=cfg.objective == "at")
    mc.validate()
    return mc


def build_corpora(cfg: ExperimentConfig) -> tuple[list[SentencePair], list[SentencePair]]:
    t = cfg.task
    if t.train_prefix:
        train, vocab = read_corpus(t.train_prefix)
        if vocab is not None and vocab != t.vocab_size:
            raise ConfigError(f"corpus vocab {vocab} != configured {t.vocab_size}")
    else:
        train = generate_corpus(t.spec(), t.n_train, sample_seed=t.seed)
    if t.valid_prefix:
        valid, _ = read_corpus(t.valid_prefix)
    else:
        valid = generate_corpus(t.spec(), t.n_valid, sample_seed=t.seed + VALID_SEED_OFFSET)
    if t.distill_teacher:
        teacher, _, _ = load_checkpoint(t.distill_teacher)
        train = distill_corpus(train, teacher)
    return train, valid


def test_corpus(cfg: ExperimentConfig) -> list[SentencePair]:
    t = cfg.task
    return generate_corpus(t.spec(), t.n_test, sample_seed=t.seed + TEST_SEED_OFFSET)


test_corpus.__test__ = False  # not a pytest test when imported into test modules


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices of the training batch at ``step``: epoch-wise shuffles keyed by (seed, epoch)."""
    per_epoch = max(n // batch_size, 1)
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch, 11]).permutation(n)
    return perm[k * batch_size:(k + 1) * batch_size]


def objective_loss(cfg: ExperimentConfig, params: M.ModelParams, srcs, tgts, ratio: float,
                   ctx: M.Context, glance_rng: np.random.Generator,
                   after_first_pass: Callable[[], None] | None = None) -> tuple[tn.Tensor, StepStats]:
    obj = cfg.objective
    g = cfg.glancing
    if obj in ("glm", "mlm_ablation"):
        return glm_loss_batch(srcs, tgts, params, g, ratio, ctx, glance_rng,
                              after_first_pass=after_first_pass)
    if obj == "nat":
        return nat_loss_batch(srcs, tgts, params, ctx, g.length_loss_weight)
    if obj in ("glat_ctc", "ctc"):
        return glat_ctc_loss_batch(srcs, tgts, params, ratio if obj == "glat_ctc" else 0.0, ctx,
                                   glance_rng, metric="lcs" if g.distance_metric == "hamming"
                                   else g.distance_metric, after_first_pass=after_first_pass)
    if obj == "at":
        loss = M.at_loss_batch(srcs, tgts, params, ctx)
        return loss, StepStats(loss=loss.item(), token_loss=loss.item())
    raise ConfigError(f"unknown objective {obj!r}")


def validation_bleu(cfg: ExperimentConfig, params: M.ModelParams, corpus) -> float:
    res = decode_corpus([p.source for p in corpus], params, cfg.decode)
    return bleu([r.tokens for r in res], [p.target for p in corpus])


@dataclass
class TrainResult:
    params: M.ModelParams
    metrics: list[dict] = field(default_factory=list)
    best: list[dict] = field(default_factory=list)
    out_dir: Path | None = None
    final_checkpoint: Path | None = None
    averaged_checkpoint: Path | None = None
    seconds: float = 0.0


class MetricsWriter:
    def __init__(self, path: Path | None):
        self.path = path
        self.records: list[dict] = []
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


def _update_best(best: list[dict], entry: dict, k: int) -> tuple[list[dict], list[dict]]:
    """Keep the ``k`` highest-BLEU entries (later steps win ties); returns (kept, dropped)."""
    ranked = sorted(best + [entry], key=lambda e: (-e["bleu"], -e["step"]))
    return ranked[:k], ranked[k:]


def train(cfg: ExperimentConfig, out_dir: str | Path | None = None, resume: str | Path | None = None,
          hooks: dict[str, Callable] | None = None, corpora=None, quiet: bool = False) -> TrainResult:
    """Train to ``cfg.optim.total_steps``.

    With ``out_dir`` set, writes ``metrics.jsonl``, ``config.ini``, periodic
    ``ckpt_<step>.npz`` files for the best ``keep_best`` validation scores,
    ``last.npz`` (with optimiser state, usable for ``resume``), ``best.json``
    and, if enabled, ``averaged.npz``.
    """
    cfg.validate()
    hooks = hooks or {}
    t0 = time.time()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.ini")
    train_set, valid_set = corpora if corpora is not None else build_corpora(cfg)
    srcs_all = [list(p.source) for p in train_set]
    tgts_all = [list(p.target) for p in train_set]

    mc = model_config_for(cfg)
    params = M.init_params(mc, seed=cfg.run.seed)
    opt = tn.Adam(params.trainable(), lr=cfg.optim.lr, betas=(cfg.optim.beta1, cfg.optim.beta2),
                  eps=cfg.optim.eps)
    start = 0
    best: list[dict] = []
    if resume is not None:
        loaded, meta, optim_state = load_checkpoint(resume)
        for k, t in loaded.tensors.items():
            params[k].data = t.data.copy()
        opt.load_state_arrays(optim_state)
        start = int(meta["step"])
        best = meta.get("best", [])
    metrics = MetricsWriter(out / "metrics.jsonl" if out is not None else None)
    total = cfg.optim.total_steps
    seed = cfg.run.seed
    acc: list[StepStats] = []

    def checkpoint_meta(step, **extra):
        return {"step": step, "objective": cfg.objective, "vocab_size": cfg.task.vocab_size,
                "best": best, **extra}

    for step in range(start, total):
        idx = batch_indices(len(train_set), cfg.optim.batch_size, seed, step)
        srcs = [srcs_all[i] for i in idx]
        tgts = [tgts_all[i] for i in idx]
        ratio = ratio_schedule_value(cfg.glancing, step, total)
        ctx = M.Context(True, np.random.default_rng([seed, step, 2]), mc.dropout)
        glance_rng = np.random.default_rng([seed, step, 3])
        before = hooks.get("before_step")
        if before:
            before(step, params, opt)
        after = hooks.get("after_first_pass")
        loss, stats = objective_loss(cfg, params, srcs, tgts, ratio, ctx, glance_rng,
                                     (lambda: after(step, params, opt)) if after else None)
        tn.backward(loss)
        lr = learning_rate(cfg, step + 1)
        opt.step(lr)
        acc.append(stats)
        if hooks.get("after_step"):
            hooks["after_step"](step, params, opt, stats)

        done = step + 1
        if done % cfg.run.log_interval == 0 or done == total:
            metrics.write({
                "type": "train", "step": done, "lambda": ratio, "lr": lr,
                "loss": float(np.mean([s.loss for s in acc])),
                "mean_distance": float(np.mean([s.mean_distance for s in acc])),
                "mean_glance_fraction": float(np.mean([s.mean_glance_fraction for s in acc])),
                "length_accuracy": float(np.mean([s.length_accuracy for s in acc])),
            })
            if not quiet:
                r = metrics.records[-1]
                log.info("step %d loss %.4f lambda %.3f d %.2f S/T %.3f", done, r["loss"],
                         ratio, r["mean_distance"], r["mean_glance_fraction"])
            acc = []
        if done % cfg.run.valid_interval == 0 or done == total:
            score = validation_bleu(cfg, params, valid_set)
            metrics.write({"type": "valid", "step": done, "bleu": score})
            if not quiet:
                log.info("step %d valid BLEU %.2f", done, score)
            if out is not None:
                path = out / f"ckpt_{done:06d}.npz"
                best, dropped = _update_best(best, {"step": done, "bleu": score, "path": str(path)},
                                             cfg.run.keep_best)
                if any(e["path"] == str(path) for e in best):
                    save_checkpoint(path, params, checkpoint_meta(done, valid_bleu=score))
                for e in dropped:
                    Path(e["path"]).unlink(missing_ok=True)
                save_checkpoint(out / "last.npz", params, checkpoint_meta(done, valid_bleu=score),
                                opt.state_arrays())
                (out / "best.json").write_text(json.dumps(best, indent=2))
            else:
                best, _ = _update_best(best, {"step": done, "bleu": score, "path": None},
                                       cfg.run.keep_best)

    result = TrainResult(params=params, metrics=metrics.records, best=best, out_dir=out)
    if out is not None:
        result.final_checkpoint = out / "last.npz"
        if cfg.run.average_best and best:
            result.averaged_checkpoint = out / "averaged.npz"
            average_checkpoints([e["path"] for e in best], result.averaged_checkpoint)
    result.seconds = time.time() - t0
    return result
