"""Configuration dataclasses and the JSON run-config loader."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any, Dict, Tuple, Type, TypeVar

STRATEGIES = ("adapter", "lora", "prefix", "bitfit", "full", "none")

T = TypeVar("T")


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration."""


def _from_dict(cls: Type[T], data: Dict[str, Any], where: str) -> T:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            value = data[f.name]
            if isinstance(value, list):
                value = tuple(value)
            kwargs[f.name] = value
    obj = cls(**kwargs)
    validate = getattr(obj, "validate", None)
    if validate is not None:
        validate()
    return obj


@dataclass
class ModelConfig:
    """Acoustic model dimensions.

    Args:
        vocab_size: number of phoneme ids.
        d_model: hidden width of every FFT layer.
        n_heads: attention heads in FFT layers.
        n_enc_layers / n_dec_layers: FFT stack depths.
        conv_kernel: odd kernel width of the convolutional feed-forward.
        d_inner: inner width of the convolutional feed-forward.
        mel_dim: mel channels.
        d_spk: speaker embedding width.
        max_frames: cap on decoded length.
        n_speakers: rows in the speaker lookup table.
        n_style_tokens / gst_heads / ref_channels: style-token encoder sizes.
        align_dim: width of the aligner's shared projection space.
        prior_scale: beta-binomial prior scaling (omega).
        precision: "float32" or "float64".
    """

    vocab_size: int = 40
    d_model: int = 64
    n_heads: int = 2
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    conv_kernel: int = 3
    d_inner: int = 128
    mel_dim: int = 20
    d_spk: int = 64
    max_frames: int = 512
    n_speakers: int = 8
    n_style_tokens: int = 8
    gst_heads: int = 2
    ref_channels: int = 32
    align_dim: int = 32
    prior_scale: float = 1.0
    ln_eps: float = 1e-5
    precision: str = "float32"

    def validate(self) -> None:
        counts = ("vocab_size", "d_model", "n_heads", "n_enc_layers", "n_dec_layers",
                  "conv_kernel", "d_inner", "d_spk", "max_frames", "n_speakers",
                  "n_style_tokens", "gst_heads", "ref_channels", "align_dim")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError("model.d_model must be divisible by model.n_heads")
        if self.d_spk % self.gst_heads:
            raise ConfigError("model.d_spk must be divisible by model.gst_heads")
        if self.conv_kernel % 2 == 0:
            raise ConfigError("model.conv_kernel must be odd")
        if self.mel_dim < 2:
            raise ConfigError("model.mel_dim must be >= 2")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("model.precision must be 'float32' or 'float64'")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        return _from_dict(cls, data, "model")


@dataclass
class PeftConfig:
    """Which parameter-efficient strategy to use, and its sizes."""

    strategy: str = "adapter"
    adapter_bottleneck: int = 8
    adapter_dropout: float = 0.1
    adapter_ln: bool = True
    lora_rank: int = 4
    lora_scale: float = 8.0
    lora_targets: Tuple[str, ...] = ("q", "k")
    prefix_len: int = 4
    prefix_init_std: float = 0.01
    adapt_predictors: bool = True
    adapt_aligner: bool = True
    train_mix_weights: bool = True
    train_cln: bool = False

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.strategy == "adapter" and self.adapter_bottleneck < 1:
            raise ConfigError("peft.adapter_bottleneck must be >= 1")
        if self.strategy == "lora":
            if self.lora_rank < 1:
                raise ConfigError("peft.lora_rank must be >= 1")
            if not set(self.lora_targets) <= {"q", "k", "v"}:
                raise ConfigError("peft.lora_targets must be drawn from q, k, v")
        if self.strategy == "prefix" and self.prefix_len < 1:
            raise ConfigError("peft.prefix_len must be >= 1")
        if not 0.0 <= self.adapter_dropout < 1.0:
            raise ConfigError("peft.adapter_dropout must be in [0, 1)")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PeftConfig":
        return _from_dict(cls, data, "peft")


@dataclass
class LossWeights:
    pitch: float = 0.1
    duration: float = 0.1
    align: float = 0.1

    def validate(self) -> None:
        for name in ("pitch", "duration", "align"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss.{name} must be >= 0")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LossWeights":
        return _from_dict(cls, data, "loss")


@dataclass
class TrainConfig:
    """Optimizer and schedule settings for both training stages."""

    pretrain_epochs: int = 60
    pretrain_batch: int = 16
    pretrain_lr: float = 1e-3
    adapt_steps: int = 1500
    adapt_batch: int = 8
    adapt_lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    align_in_adapt: bool = False
    aligner_durations: bool = False

    def validate(self) -> None:
        if self.pretrain_epochs < 0 or self.adapt_steps < 0:
            raise ConfigError("train: epoch/step counts must be >= 0")
        if self.pretrain_batch < 1 or self.adapt_batch < 1:
            raise ConfigError("train: batch sizes must be >= 1")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        return _from_dict(cls, data, "train")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    peft: PeftConfig = field(default_factory=PeftConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = sorted(set(data) - {"model", "peft", "loss", "train", "seed"})
        if unknown:
            raise ConfigError(f"unknown keys {unknown}")
        seed = data.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigError("seed must be an integer")
        return cls(
            model=ModelConfig.from_dict(data.get("model", {})),
            peft=PeftConfig.from_dict(data.get("peft", {})),
            loss=LossWeights.from_dict(data.get("loss", {})),
            train=TrainConfig.from_dict(data.get("train", {})),
            seed=seed,
        )

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        return to_dict(self)


def to_dict(obj) -> Dict[str, Any]:
    d = dataclasses.asdict(obj)
    return json.loads(json.dumps(d))
