"""Speaker identity: lookup table, style-token reference encoder, and their sum."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn
from torch.nn import functional as F


class SpeakerError(ValueError):
    pass


@dataclass
class SpeakerEmbedding:
    se1: torch.Tensor
    se2: torch.Tensor

    @property
    def se_final(self) -> torch.Tensor:
        return combine(self.se1, self.se2)


def lookup(speaker_id, table: torch.Tensor) -> torch.Tensor:
    ids = torch.as_tensor(speaker_id)
    if bool((ids < 0).any()) or bool((ids >= table.size(0)).any()):
        raise SpeakerError(f"speaker id out of range [0, {table.size(0)})")
    return table[ids]


def combine(se1: torch.Tensor, se2: torch.Tensor) -> torch.Tensor:
    return se1 + se2


def mix_weights(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=-1)


def weighted_mean_se1(logits: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """Convex combination of the pre-trained speaker rows."""
    return mix_weights(logits) @ table


def _conv_len(lengths: torch.Tensor) -> torch.Tensor:
    # kernel 3, stride 2, padding 1
    return torch.div(lengths - 1, 2, rounding_mode="floor") + 1


class ReferenceEncoder(nn.Module):
    """Two strided convolutions over frames followed by a GRU; returns its final state."""

    def __init__(self, mel_dim: int, channels: int = 32):
        super().__init__()
        self.conv1 = nn.Conv1d(mel_dim, channels, 3, stride=2, padding=1)
        self.conv2 = nn.Conv1d(channels, channels, 3, stride=2, padding=1)
        self.gru = nn.GRU(channels, channels, batch_first=True)

    def forward(self, mel: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        if mel.size(1) == 0 or bool((lengths < 1).any()):
            raise SpeakerError("reference spectrogram is empty")
        x = mel.transpose(1, 2)
        for conv in (self.conv1, self.conv2):
            steps = torch.arange(x.size(2), device=x.device)
            x = x * (steps[None, :] < lengths[:, None]).to(x.dtype)[:, None, :]
            x = F.relu(conv(x))
            lengths = _conv_len(lengths)
        packed = nn.utils.rnn.pack_padded_sequence(
            x.transpose(1, 2), lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        _, h = self.gru(packed)
        return h[-1]


class StyleTokenLayer(nn.Module):
    """Multi-head attention from a reference query onto K learned style tokens."""

    def __init__(self, n_tokens: int, d_spk: int, query_dim: int, n_heads: int = 2):
        super().__init__()
        if n_tokens < 1:
            raise SpeakerError("need at least one style token")
        self.n_heads = n_heads
        self.tokens = nn.Parameter(torch.randn(n_tokens, d_spk) * 0.5)
        self.query = nn.Linear(query_dim, d_spk)
        self.key = nn.Linear(d_spk, d_spk)
        self.value = nn.Linear(d_spk, d_spk)
        self.out = nn.Linear(d_spk, d_spk)

    def forward(self, query: torch.Tensor):
        """Return (se2 (B, d_spk), weights (B, heads, K))."""
        B = query.size(0)
        H = self.n_heads
        keys = torch.tanh(self.tokens)
        K, D = keys.shape
        dh = D // H
        q = self.query(query).view(B, H, 1, dh)
        k = self.key(keys).view(K, H, dh).transpose(0, 1)
        v = self.value(keys).view(K, H, dh).transpose(0, 1)
        scores = (q @ k.transpose(-1, -2).unsqueeze(0)) / dh ** 0.5
        weights = torch.softmax(scores, dim=-1)
        ctx = (weights @ v.unsqueeze(0)).reshape(B, D)
        return self.out(ctx), weights.squeeze(2)


class SpeakerEncoder(nn.Module):
    """Holds the lookup table (SE1), the GST encoder (SE2), and per-speaker SE2 cache.

    During adaptation ``mix_logits`` and ``ref_mel`` are attached; the new
    speaker's SE1 is then the softmax-weighted mean of the frozen table rows
    and SE2 comes from the stored reference spectrogram.
    """

    def __init__(self, n_speakers: int, d_spk: int, mel_dim: int, n_tokens: int = 8,
                 gst_heads: int = 2, ref_channels: int = 32):
        super().__init__()
        self.table = nn.Embedding(n_speakers, d_spk)
        nn.init.normal_(self.table.weight, std=0.3)
        self.ref_encoder = ReferenceEncoder(mel_dim, ref_channels)
        self.gst = StyleTokenLayer(n_tokens, d_spk, ref_channels, gst_heads)
        self.register_buffer("se2_cache", torch.zeros(n_speakers, d_spk))
        self.register_parameter("mix_logits", None)
        self.register_buffer("ref_mel", None)

    @property
    def n_speakers(self) -> int:
        return self.table.num_embeddings

    def attach_new_speaker(self, ref_mel: torch.Tensor) -> None:
        """Start a new-speaker slot: uniform mix logits and a fixed reference."""
        self.mix_logits = nn.Parameter(torch.zeros(self.n_speakers, dtype=self.table.weight.dtype))
        self.register_buffer("ref_mel", ref_mel.detach().to(self.table.weight.dtype).clone())

    @property
    def has_new_speaker(self) -> bool:
        return self.mix_logits is not None

    def gst_encode(self, ref_mel: torch.Tensor, lengths: Optional[torch.Tensor] = None):
        """SE2 and attention weights for a (B, T, mel) batch of references."""
        if ref_mel.dim() == 2:
            ref_mel = ref_mel[None]
        if lengths is None:
            lengths = torch.full((ref_mel.size(0),), ref_mel.size(1), dtype=torch.long)
        return self.gst(self.ref_encoder(ref_mel, lengths))

    def new_speaker(self) -> SpeakerEmbedding:
        if not self.has_new_speaker:
            raise SpeakerError("no new-speaker slot attached")
        se1 = weighted_mean_se1(self.mix_logits, self.table.weight)
        se2, _ = self.gst_encode(self.ref_mel)
        return SpeakerEmbedding(se1[None], se2)

    def pretrained(self, speaker_ids) -> SpeakerEmbedding:
        ids = torch.as_tensor(speaker_ids, dtype=torch.long).reshape(-1)
        return SpeakerEmbedding(lookup(ids, self.table.weight), self.se2_cache[ids])

    def from_reference(self, speaker_ids, ref_mel, lengths) -> SpeakerEmbedding:
        """Training path: SE1 by id, SE2 from each item's own reference."""
        se2, _ = self.gst_encode(ref_mel, lengths)
        return SpeakerEmbedding(lookup(speaker_ids, self.table.weight), se2)
