"""Model <-> checkpoint conversion for base checkpoints and deltas."""
from __future__ import annotations

from collections import OrderedDict
from typing import Any, Dict, Optional, Tuple

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import ModelConfig, PeftConfig, to_dict
from .model import AcousticModel
from .peft import TrainableSet, apply_delta, export_delta, peft_state_names


def base_tensors(model: AcousticModel) -> "OrderedDict[str, np.ndarray]":
    skip = set(peft_state_names(model))
    out = OrderedDict()
    for name, value in model.state_dict().items():
        if name not in skip:
            out[name] = value.detach().cpu().numpy().copy()
    return out


def base_to_bytes(model: AcousticModel) -> bytes:
    config = {"model": to_dict(model.cfg), "meta": getattr(model, "meta", {})}
    return ckpt.dumps(base_tensors(model), ckpt.KIND_BASE, config)


def base_sha256(model: AcousticModel) -> bytes:
    return ckpt.sha256(base_to_bytes(model))


def base_from_checkpoint(c: ckpt.Checkpoint) -> AcousticModel:
    if c.kind != ckpt.KIND_BASE:
        raise ckpt.CheckpointError("not a base checkpoint")
    cfg = ModelConfig.from_dict(c.config["model"])
    model = AcousticModel(cfg)
    state = model.state_dict()
    missing = [n for n in state if n not in c.tensors]
    unknown = [n for n in c.tensors if n not in state]
    if missing or unknown:
        raise ckpt.CheckpointError(f"base tensor mismatch: missing={missing[:5]} unknown={unknown[:5]}")
    with torch.no_grad():
        for name, value in c.tensors.items():
            if tuple(state[name].shape) != value.shape:
                raise ckpt.CheckpointError(f"{name}: shape mismatch")
            state[name].copy_(torch.from_numpy(value))
    model.meta = dict(c.config.get("meta", {}))
    model.eval()
    return model


def load_base(path: str) -> Tuple[AcousticModel, bytes]:
    """Load a base checkpoint; returns the model and the file's SHA-256."""
    c, raw = ckpt.read_file(path)
    return base_from_checkpoint(c), ckpt.sha256(raw)


def save_base(model: AcousticModel, path: str) -> bytes:
    raw = base_to_bytes(model)
    ckpt.write_atomic(path, raw)
    return ckpt.sha256(raw)


def delta_to_bytes(model: AcousticModel, base_sha: bytes, tset: TrainableSet, cfg: PeftConfig,
                   extra: Optional[Dict[str, Any]] = None) -> bytes:
    d = export_delta(model, base_sha, tset, cfg, extra)
    return ckpt.dumps(d.tensors, d.kind, d.config, d.base_sha256)


def load_delta(path: str) -> ckpt.Checkpoint:
    c, _ = ckpt.read_file(path)
    if c.kind != ckpt.KIND_DELTA:
        raise ckpt.CheckpointError(f"{path}: not a delta checkpoint")
    return c


def compose(base: AcousticModel, base_sha: bytes, delta: Optional[ckpt.Checkpoint]) -> AcousticModel:
    return base if delta is None else apply_delta(base, base_sha, delta)
