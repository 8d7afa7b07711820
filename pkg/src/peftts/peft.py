"""Parameter-efficient modules, their injection points, and delta export/apply."""
from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple

import torch
from torch import nn
from torch.nn import functional as F

from .checkpoint import Checkpoint, CheckpointError, IncompatibleDeltaError, KIND_DELTA
from .config import PeftConfig, STRATEGIES, ConfigError, to_dict
from .model import AcousticModel, CondLayerNorm, FFTLayer


class Adapter(nn.Module):
    """Bottleneck adapter with an internal skip: x + up(drop(relu(down(ln(x)))))."""

    def __init__(self, dim: int, bottleneck: int, dropout: float = 0.1, use_ln: bool = True):
        super().__init__()
        self.ln = nn.LayerNorm(dim) if use_ln else None
        self.down = nn.Linear(dim, bottleneck)
        self.up = nn.Linear(bottleneck, dim)
        self.dropout = nn.Dropout(dropout)
        nn.init.kaiming_uniform_(self.down.weight, nonlinearity="relu")
        nn.init.zeros_(self.down.bias)
        # zero up-projection makes the module an exact identity at init
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.ln(x) if self.ln is not None else x
        return x + self.up(self.dropout(F.relu(self.down(h))))


def adapter_forward(x: torch.Tensor, adapter: Adapter, train_mode: bool = False) -> torch.Tensor:
    was = adapter.training
    adapter.train(train_mode)
    try:
        return adapter(x)
    finally:
        adapter.train(was)


class LoraDelta(nn.Module):
    """Additive low-rank update ``scale * B @ A`` with a fixed, non-trainable scale."""

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float):
        super().__init__()
        self.rank = rank
        self.scale = alpha / rank
        self.A = nn.Parameter(torch.randn(rank, d_in) / rank ** 0.5)
        self.B = nn.Parameter(torch.zeros(d_out, rank))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.scale * ((x @ self.A.T) @ self.B.T)


def lora_project(x: torch.Tensor, weight: torch.Tensor, A: torch.Tensor, B: torch.Tensor,
                 scale: float, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    return F.linear(x, weight, bias) + scale * ((x @ A.T) @ B.T)


class PrefixKV(nn.Module):
    """Trainable key/value rows prepended in one attention layer."""

    def __init__(self, length: int, d_model: int, std: float = 0.01):
        super().__init__()
        self.P_k = nn.Parameter(torch.randn(length, d_model) * std)
        self.P_v = nn.Parameter(torch.randn(length, d_model) * std)

    def heads(self, n_heads: int) -> Tuple[torch.Tensor, torch.Tensor]:
        L, D = self.P_k.shape
        split = lambda p: p.view(L, n_heads, D // n_heads).transpose(0, 1)
        return split(self.P_k), split(self.P_v)


PEFT_MODULES = (Adapter, LoraDelta, PrefixKV)


def fft_layers(model: AcousticModel) -> List[FFTLayer]:
    return list(model.encoder.layers) + list(model.decoder.layers)


def inject(model: AcousticModel, cfg: PeftConfig) -> AcousticModel:
    """Attach the strategy's modules to ``model`` in place (new tensors share its dtype)."""
    cfg.validate()
    d = model.cfg.d_model
    dtype = model.dtype
    if cfg.strategy == "adapter":
        make = lambda dim: Adapter(dim, cfg.adapter_bottleneck, cfg.adapter_dropout, cfg.adapter_ln).to(dtype)
        for layer in fft_layers(model):
            layer.adapter = make(d)
        if cfg.adapt_predictors:
            for pred in (model.pitch_predictor, model.duration_predictor):
                pred.adapters = nn.ModuleList([make(d), make(d)])
        if cfg.adapt_aligner:
            model.aligner.text_adapter = make(model.cfg.align_dim)
            model.aligner.mel_adapter = make(model.cfg.align_dim)
    elif cfg.strategy == "lora":
        for layer in fft_layers(model):
            layer.attn.lora = nn.ModuleDict(
                {t: LoraDelta(d, d, cfg.lora_rank, cfg.lora_scale).to(dtype) for t in cfg.lora_targets}
            )
    elif cfg.strategy == "prefix":
        for layer in fft_layers(model):
            layer.attn.prefix = PrefixKV(cfg.prefix_len, d, cfg.prefix_init_std).to(dtype)
    return model


def prepare_adaptation(model: AcousticModel, cfg: PeftConfig, ref_mel: torch.Tensor) -> AcousticModel:
    """New-speaker slot (uniform mix weights + fixed reference) and the strategy's modules."""
    model.speaker.attach_new_speaker(torch.as_tensor(ref_mel))
    return inject(model, cfg)


def is_bias(name: str) -> bool:
    return name.rsplit(".", 1)[-1].startswith("bias")


def peft_param_names(model: nn.Module) -> List[str]:
    names = []
    for mname, module in model.named_modules():
        if isinstance(module, PEFT_MODULES):
            names.extend(f"{mname}.{p}" for p, _ in module.named_parameters())
    return names


def peft_state_names(model: nn.Module) -> List[str]:
    """State entries that belong to the per-speaker delta rather than the shared base."""
    names = []
    for mname, module in model.named_modules():
        if isinstance(module, PEFT_MODULES):
            names.extend(f"{mname}.{p}" for p in module.state_dict())
    for extra in ("speaker.mix_logits", "speaker.ref_mel"):
        if extra in model.state_dict():
            names.append(extra)
    return names


@dataclass(frozen=True)
class TrainableSet:
    trainable: Tuple[str, ...]
    frozen: Tuple[str, ...]

    def __contains__(self, name: str) -> bool:
        return name in self.trainable

    def count(self, model: nn.Module) -> int:
        params = dict(model.named_parameters())
        return sum(params[n].numel() for n in self.trainable)


def build_trainable_set(cfg: PeftConfig, model: AcousticModel) -> TrainableSet:
    """Partition every parameter of ``model`` into trainable and frozen.

    The strategy picks its own tensors; the flags add the mixing logits and
    CLN projections. The speaker table, reference encoder and style tokens
    stay frozen for every strategy except ``full``.
    """
    if cfg.strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {cfg.strategy!r}")
    all_names = [n for n, _ in model.named_parameters()]
    chosen = set()
    if cfg.strategy in ("adapter", "lora", "prefix"):
        chosen.update(peft_param_names(model))
    elif cfg.strategy == "bitfit":
        chosen.update(n for n in all_names if is_bias(n) and not n.startswith("speaker."))
    elif cfg.strategy == "full":
        chosen.update(all_names)
    if cfg.train_mix_weights and "speaker.mix_logits" in all_names:
        chosen.add("speaker.mix_logits")
    if cfg.train_cln:
        for mname, module in model.named_modules():
            if isinstance(module, CondLayerNorm):
                chosen.update(f"{mname}.{p}" for p, _ in module.named_parameters())
    trainable = tuple(n for n in all_names if n in chosen)
    frozen = tuple(n for n in all_names if n not in chosen)
    return TrainableSet(trainable, frozen)


def set_trainable(model: nn.Module, tset: TrainableSet) -> None:
    for name, p in model.named_parameters():
        p.requires_grad_(name in tset)


def export_delta(model: AcousticModel, base_sha256: bytes, tset: TrainableSet, cfg: PeftConfig,
                 extra: Optional[dict] = None) -> Checkpoint:
    """Collect trainable tensors plus the new speaker's reference into a delta."""
    state = model.state_dict()
    tensors = OrderedDict()
    for name in tset.trainable:
        tensors[name] = state[name].detach().cpu().numpy().copy()
    if "speaker.ref_mel" in state:
        tensors["speaker.ref_mel"] = state["speaker.ref_mel"].detach().cpu().numpy().copy()
    config = {"peft": to_dict(cfg), "trainable": list(tset.trainable)}
    if extra:
        config.update(extra)
    return Checkpoint(kind=KIND_DELTA, tensors=tensors, config=config, base_sha256=bytes(base_sha256))


def apply_delta(base: AcousticModel, base_sha256: bytes, delta: Checkpoint) -> AcousticModel:
    """A fresh model = copy of ``base`` with the delta's modules attached and tensors loaded.

    ``base`` itself is never modified.
    """
    if delta.kind != KIND_DELTA:
        raise CheckpointError("not a delta checkpoint")
    if delta.base_sha256 != bytes(base_sha256):
        raise IncompatibleDeltaError("incompatible delta: base checksum mismatch")
    cfg = PeftConfig.from_dict(delta.config["peft"])
    if "speaker.ref_mel" not in delta.tensors:
        raise CheckpointError("delta lacks the new speaker's reference spectrogram")
    model = copy.deepcopy(base)
    prepare_adaptation(model, cfg, torch.from_numpy(delta.tensors["speaker.ref_mel"]))
    state = model.state_dict()
    unknown = [n for n in delta.tensors if n not in state]
    if unknown:
        raise CheckpointError(f"unknown tensor names in delta: {unknown[:5]}")
    with torch.no_grad():
        for name, value in delta.tensors.items():
            target = state[name]
            if tuple(target.shape) != value.shape:
                raise CheckpointError(f"{name}: shape {value.shape} != {tuple(target.shape)}")
            target.copy_(torch.from_numpy(value).to(target.dtype))
    model.eval()
    return model


def count_parameters(model: nn.Module, names: Optional[Iterable[str]] = None) -> int:
    params = dict(model.named_parameters())
    if names is None:
        return sum(p.numel() for p in params.values())
    return sum(params[n].numel() for n in names)
