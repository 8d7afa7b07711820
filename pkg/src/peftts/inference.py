"""End-to-end synthesis from a shared base plus an optional per-speaker delta."""
from __future__ import annotations

from typing import Optional, Sequence, Tuple

import torch

from .checkpoint import Checkpoint
from .model import AcousticModel
from .serialize import compose


def speaker_vector(model: AcousticModel, speaker_id: Optional[int] = None) -> torch.Tensor:
    """SE_final for the attached new speaker, or for a pre-trained speaker id."""
    with torch.no_grad():
        if model.speaker.has_new_speaker:
            return model.speaker.new_speaker().se_final[0]
        if speaker_id is None:
            raise ValueError("a speaker id is required without a delta")
        return model.speaker.pretrained([speaker_id]).se_final[0]


def synthesize(tokens: Sequence[int], base: AcousticModel, base_sha: bytes, delta: Optional[Checkpoint] = None,
               speaker_id: Optional[int] = None) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """encode -> pitch & duration -> length regulation -> decode.

    Without ``delta`` this is the pure base path for pre-trained ``speaker_id``;
    with it, the delta's modules and speaker tensors are active.
    """
    model = compose(base, base_sha, delta)
    model.eval()
    return model.infer(torch.as_tensor(list(tokens), dtype=torch.long), speaker_vector(model, speaker_id))
