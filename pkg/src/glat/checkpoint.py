"""Checkpoint files: an ``.npz`` container of named float64 arrays plus JSON metadata."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, ModelParams
from .tensor import Tensor

FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, params: ModelParams, meta: dict | None = None,
                    optimizer_state: dict[str, np.ndarray] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format_version": FORMAT_VERSION, "model": asdict(params.config),
              "trainable": sorted(params.trainable()), **(meta or {})}
    arrays = {f"param/{k}": np.ascontiguousarray(t.data) for k, t in params.tensors.items()}
    for k, v in (optimizer_state or {}).items():
        arrays[f"optim/{k}"] = v
    arrays["__meta__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict, dict[str, np.ndarray]]:
    """Returns ``(params, meta, optimizer_state)``."""
    try:
        with np.load(path) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            arrays = {k: z[k] for k in z.files if k != "__meta__"}
    except (OSError, KeyError, ValueError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
    trainable = set(meta.get("trainable", []))
    config = ModelConfig(**meta["model"])
    tensors = {k[len("param/"):]: Tensor(v, requires_grad=k[len("param/"):] in trainable,
                                         name=k[len("param/"):])
               for k, v in arrays.items() if k.startswith("param/")}
    optim = {k[len("optim/"):]: v for k, v in arrays.items() if k.startswith("optim/")}
    return ModelParams(config, tensors), meta, optim


def average_checkpoints(paths, out: str | Path | None = None) -> ModelParams:
    """Element-wise mean of parameters across checkpoints with identical layouts."""
    paths = list(paths)
    if not paths:
        raise CheckpointError("need at least one checkpoint to average")
    first, meta, _ = load_checkpoint(paths[0])
    # mean as first + sum(x_i - first) / n: exact when all inputs agree
    acc = {k: np.zeros_like(t.data) for k, t in first.tensors.items()}
    for p in paths[1:]:
        other, _, _ = load_checkpoint(p)
        if set(other.tensors) != set(acc):
            raise CheckpointError(f"{p}: parameter names differ from {paths[0]}")
        for k, t in other.tensors.items():
            if t.shape != acc[k].shape:
                raise CheckpointError(f"{p}: shape of {k} is {t.shape}, expected {acc[k].shape}")
            acc[k] += t.data - first[k].data
    n = float(len(paths))
    averaged = ModelParams(first.config, {
        k: Tensor(first[k].data + acc[k] / n, requires_grad=first[k].requires_grad, name=k)
        for k in acc})
    if out is not None:
        meta = {k: v for k, v in meta.items() if k not in ("format_version", "model", "trainable")}
        meta["averaged_from"] = [str(p) for p in paths]
        save_checkpoint(out, averaged, meta)
    return averaged
