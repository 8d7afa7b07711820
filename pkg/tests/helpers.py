"""Model construction helpers shared by the tests."""
import numpy as np
import torch

from peftts.config import ModelConfig
from peftts.model import AcousticModel, CondLayerNorm


def make_model(precision: str = "float64", seed: int = 0, **overrides) -> AcousticModel:
    torch.manual_seed(seed)
    return AcousticModel(ModelConfig(precision=precision, **overrides))


def perturb_cln(model, std: float = 0.1, seed: int = 1) -> None:
    """Stand-in for training: give every conditional projection non-zero weights."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, CondLayerNorm):
                for lin in (m.scale, m.shift):
                    lin.weight.add_(torch.randn(lin.weight.shape, generator=g, dtype=lin.weight.dtype) * std)


def random_spk(model, batch: int = 1, seed: int = 0) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(batch, model.cfg.d_spk, generator=g, dtype=model.dtype)


# one "criterion N: PASS/FAIL ..." line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []
