"""Parameter-efficient speaker adaptation for a multi-speaker non-autoregressive acoustic model."""
from .config import LossWeights, ModelConfig, PeftConfig, RunConfig, TrainConfig
from .model import AcousticModel
from .peft import apply_delta, build_trainable_set, export_delta, inject, prepare_adaptation

__all__ = [
    "AcousticModel",
    "LossWeights",
    "ModelConfig",
    "PeftConfig",
    "RunConfig",
    "TrainConfig",
    "apply_delta",
    "build_trainable_set",
    "export_delta",
    "inject",
    "prepare_adaptation",
]

__version__ = "0.1.0"
