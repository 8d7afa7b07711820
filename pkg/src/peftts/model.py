"""Multi-speaker FastPitch-style acoustic model with conditional layer norm."""
from __future__ import annotations

import math
from typing import Dict, Optional, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .align import Aligner
from .config import ModelConfig
from .speaker import SpeakerEncoder

# Finite fill for masked attention scores; exp() of it underflows to exactly 0.
MASK_FILL = -1e9


class ModelInputError(ValueError):
    pass


class CapacityError(ModelInputError):
    pass


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    inv = torch.exp(-math.log(10000.0) * i / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * inv)
    pe[:, 1::2] = torch.cos(pos * inv)[:, : dim // 2]
    return pe.to(dtype)


def sequence_mask(lengths: torch.Tensor, max_len: Optional[int] = None) -> torch.Tensor:
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


def layer_norm(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    mean = x.mean(-1, keepdim=True)
    var = ((x - mean) ** 2).mean(-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


class CondLayerNorm(nn.Module):
    """Layer norm whose gain and shift are affine functions of the speaker embedding.

    Projections start at zero weight with gain bias 1 and shift bias 0, so at
    init this is plain (unconditional) layer normalization.
    """

    def __init__(self, d_model: int, d_spk: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.scale = nn.Linear(d_spk, d_model)
        self.shift = nn.Linear(d_spk, d_model)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        nn.init.zeros_(self.scale.weight)
        nn.init.ones_(self.scale.bias)
        nn.init.zeros_(self.shift.weight)
        nn.init.zeros_(self.shift.bias)

    def forward(self, x: torch.Tensor, spk: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3 and spk.dim() == 2:
            spk = spk[:, None, :]
        return self.scale(spk) * layer_norm(x, self.eps) + self.shift(spk)


def attention(q, k, v, key_mask: Optional[torch.Tensor] = None, return_weights: bool = False):
    """Scaled dot-product attention over (B, H, L, dh) tensors."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.size(-1))
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, None, :], MASK_FILL)
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


def prefix_attend(q, k, v, prefix_k=None, prefix_v=None, key_mask=None, return_weights=False):
    """Attention with trainable prefix rows prepended to keys and values.

    ``prefix_k``/``prefix_v`` are (H, L_p, dh). Queries are not extended, so
    the output length is unchanged. ``L_p = 0`` (or None) is plain attention.
    """
    if prefix_k is None or prefix_k.size(-2) == 0:
        return attention(q, k, v, key_mask, return_weights)
    B = q.size(0)
    pk = prefix_k[None].expand(B, -1, -1, -1)
    pv = prefix_v[None].expand(B, -1, -1, -1)
    k = torch.cat([pk, k], dim=2)
    v = torch.cat([pv, v], dim=2)
    if key_mask is not None:
        ones = key_mask.new_ones(B, prefix_k.size(-2))
        key_mask = torch.cat([ones, key_mask], dim=1)
    return attention(q, k, v, key_mask, return_weights)


class SelfAttention(nn.Module):
    """Multi-head self-attention with optional LoRA on projections and prefix K/V."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.o_proj = nn.Linear(d_model, d_model)
        self.lora: Optional[nn.ModuleDict] = None
        self.prefix: Optional[nn.Module] = None

    def _project(self, name: str, x: torch.Tensor) -> torch.Tensor:
        y = getattr(self, f"{name}_proj")(x)
        if self.lora is not None and name in self.lora:
            y = y + self.lora[name](x)
        return y

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        B, L, D = x.shape
        return x.view(B, L, self.n_heads, D // self.n_heads).transpose(1, 2)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None, return_weights: bool = False):
        B, L, D = x.shape
        q = self._heads(self._project("q", x))
        k = self._heads(self._project("k", x))
        v = self._heads(self._project("v", x))
        if self.prefix is not None:
            pk, pv = self.prefix.heads(self.n_heads)
            out = prefix_attend(q, k, v, pk, pv, mask, return_weights)
        else:
            out = attention(q, k, v, mask, return_weights)
        weights = None
        if return_weights:
            out, weights = out
        out = self.o_proj(out.transpose(1, 2).reshape(B, L, D))
        return (out, weights) if return_weights else out


class ConvFeedForward(nn.Module):
    def __init__(self, d_model: int, d_inner: int, kernel: int):
        super().__init__()
        self.conv1 = nn.Conv1d(d_model, d_inner, kernel, padding=kernel // 2)
        self.conv2 = nn.Conv1d(d_inner, d_model, kernel, padding=kernel // 2)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        m = None if mask is None else mask[:, None, :].to(x.dtype)
        y = x.transpose(1, 2)
        if m is not None:
            y = y * m
        y = F.relu(self.conv1(y))
        if m is not None:
            y = y * m
        return self.conv2(y).transpose(1, 2)


class FFTLayer(nn.Module):
    """attention -> add -> CLN -> conv FF -> add -> CLN -> optional output adapter."""

    def __init__(self, d_model: int, n_heads: int, d_inner: int, kernel: int, d_spk: int, eps: float = 1e-5):
        super().__init__()
        self.attn = SelfAttention(d_model, n_heads)
        self.norm1 = CondLayerNorm(d_model, d_spk, eps)
        self.ff = ConvFeedForward(d_model, d_inner, kernel)
        self.norm2 = CondLayerNorm(d_model, d_spk, eps)
        self.adapter: Optional[nn.Module] = None

    def forward(self, x, spk, mask=None):
        if x.size(-1) != self.norm1.scale.out_features:
            raise ModelInputError(f"hidden width {x.size(-1)} != d_model {self.norm1.scale.out_features}")
        if spk.size(-1) != self.norm1.scale.in_features:
            raise ModelInputError(f"speaker width {spk.size(-1)} != d_spk {self.norm1.scale.in_features}")
        m = None if mask is None else mask[..., None].to(x.dtype)
        x = self.norm1(x + self.attn(x, mask), spk)
        if m is not None:
            x = x * m
        x = self.norm2(x + self.ff(x, mask), spk)
        if self.adapter is not None:
            x = self.adapter(x)
        if m is not None:
            x = x * m
        return x


class FFTStack(nn.Module):
    """Positions + speaker concat/re-projection, then a stack of FFT layers."""

    def __init__(self, n_layers: int, d_model: int, n_heads: int, d_inner: int, kernel: int, d_spk: int, eps: float):
        super().__init__()
        self.in_proj = nn.Linear(d_model + d_spk, d_model)
        self.layers = nn.ModuleList(
            FFTLayer(d_model, n_heads, d_inner, kernel, d_spk, eps) for _ in range(n_layers)
        )

    def forward(self, x, spk, mask):
        x = x + sinusoidal_positions(x.size(1), x.size(2), x.dtype)[None]
        x = self.in_proj(torch.cat([x, spk[:, None, :].expand(-1, x.size(1), -1)], dim=-1))
        x = x * mask[..., None].to(x.dtype)
        for layer in self.layers:
            x = layer(x, spk, mask)
        return x


class VariancePredictor(nn.Module):
    """Two conv -> ReLU -> CLN blocks (each optionally followed by an adapter) and a width-1 head."""

    def __init__(self, d_model: int, d_spk: int, kernel: int, eps: float):
        super().__init__()
        self.in_proj = nn.Linear(d_model + d_spk, d_model)
        self.conv1 = nn.Conv1d(d_model, d_model, kernel, padding=kernel // 2)
        self.norm1 = CondLayerNorm(d_model, d_spk, eps)
        self.conv2 = nn.Conv1d(d_model, d_model, kernel, padding=kernel // 2)
        self.norm2 = CondLayerNorm(d_model, d_spk, eps)
        self.head = nn.Linear(d_model, 1)
        self.adapters: Optional[nn.ModuleList] = None

    def forward(self, h, spk, mask):
        m = mask[..., None].to(h.dtype)
        x = self.in_proj(torch.cat([h, spk[:, None, :].expand(-1, h.size(1), -1)], dim=-1)) * m
        for i, (conv, norm) in enumerate(((self.conv1, self.norm1), (self.conv2, self.norm2))):
            x = F.relu(conv(x.transpose(1, 2)).transpose(1, 2))
            x = norm(x, spk)
            if self.adapters is not None:
                x = self.adapters[i](x)
            x = x * m
        return self.head(x).squeeze(-1) * mask.to(h.dtype)


def length_regulate(h: torch.Tensor, durations) -> torch.Tensor:
    """Repeat row n of (N, D) ``h`` durations[n] times."""
    d = torch.as_tensor(durations, dtype=torch.long)
    if d.dim() != 1 or d.numel() != h.size(0):
        raise ModelInputError("need one duration per token")
    if bool((d < 1).any()):
        raise ModelInputError("durations must be >= 1")
    return torch.repeat_interleave(h, d, dim=0)


def length_regulate_batch(h: torch.Tensor, durations: torch.Tensor, n_lens: torch.Tensor):
    """Batched length regulation; returns (padded (B, T, D), frame lengths)."""
    rows = [length_regulate(h[i, :n], durations[i, :n]) for i, n in enumerate(n_lens.tolist())]
    t_lens = torch.tensor([r.size(0) for r in rows], dtype=torch.long)
    return nn.utils.rnn.pad_sequence(rows, batch_first=True), t_lens


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d)):
            if isinstance(m, nn.Conv1d):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            else:
                nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, std=1.0)
    for m in module.modules():
        if isinstance(m, CondLayerNorm):
            m.reset_parameters()


class AcousticModel(nn.Module):
    """Encoder, pitch/duration predictors, length regulator, decoder, aligner and speaker encoder.

    Every tensor is addressable by its ``state_dict`` name; PEFT modules are
    attached into the empty slots (``adapter``, ``adapters``, ``lora``,
    ``prefix``, ``text_adapter``, ``mel_adapter``) by :mod:`peftts.peft`.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.meta: Dict[str, object] = {}
        d, eps = cfg.d_model, cfg.ln_eps
        self.token_emb = nn.Embedding(cfg.vocab_size, d)
        self.encoder = FFTStack(cfg.n_enc_layers, d, cfg.n_heads, cfg.d_inner, cfg.conv_kernel, cfg.d_spk, eps)
        self.pitch_predictor = VariancePredictor(d, cfg.d_spk, cfg.conv_kernel, eps)
        self.duration_predictor = VariancePredictor(d, cfg.d_spk, cfg.conv_kernel, eps)
        self.pitch_emb = nn.Conv1d(1, d, 1)
        self.decoder = FFTStack(cfg.n_dec_layers, d, cfg.n_heads, cfg.d_inner, cfg.conv_kernel, cfg.d_spk, eps)
        self.mel_out = nn.Linear(d, cfg.mel_dim)
        self.aligner = Aligner(d, cfg.mel_dim, cfg.d_spk, cfg.align_dim, cfg.conv_kernel)
        _init_weights(self)
        self.speaker = SpeakerEncoder(cfg.n_speakers, cfg.d_spk, cfg.mel_dim, cfg.n_style_tokens,
                                      cfg.gst_heads, cfg.ref_channels)
        if cfg.precision == "float64":
            self.double()

    @property
    def dtype(self) -> torch.dtype:
        return self.token_emb.weight.dtype

    def _check_tokens(self, tokens: torch.Tensor) -> None:
        if tokens.numel() == 0 or tokens.size(-1) == 0:
            raise ModelInputError("empty phoneme sequence")
        if bool((tokens < 0).any()) or bool((tokens >= self.cfg.vocab_size).any()):
            raise ModelInputError(f"token ids must lie in [0, {self.cfg.vocab_size})")

    def encode(self, tokens, spk, mask=None):
        self._check_tokens(tokens)
        if mask is None:
            mask = torch.ones_like(tokens, dtype=torch.bool)
        return self.encoder(self.token_emb(tokens), spk, mask)

    def predict_pitch(self, h, spk, mask):
        return self.pitch_predictor(h, spk, mask)

    def predict_duration(self, h, spk, mask):
        """Log-domain durations."""
        return self.duration_predictor(h, spk, mask)

    def embed_pitch(self, h, pitch, mask):
        return h + self.pitch_emb(pitch[:, None, :]).transpose(1, 2) * mask[..., None].to(h.dtype)

    def decode(self, upsampled, spk, mask):
        if upsampled.size(1) > self.cfg.max_frames:
            raise CapacityError(f"{upsampled.size(1)} frames exceeds max_frames={self.cfg.max_frames}")
        return self.mel_out(self.decoder(upsampled, spk, mask)) * mask[..., None].to(upsampled.dtype)

    def rounded_durations(self, log_dur: torch.Tensor) -> torch.Tensor:
        return torch.clamp(torch.round(torch.exp(log_dur)), 1, self.cfg.max_frames).long()

    def forward(self, tokens, n_lens, spk, durations, pitch=None, mel=None, t_lens=None,
                with_alignment: bool = False) -> Dict[str, torch.Tensor]:
        """Duration-forced pass: given durations regulate length. ``pitch`` (ground
        truth in training) feeds the pitch embedding; None uses the prediction."""
        tok_mask = sequence_mask(n_lens, tokens.size(1))
        h = self.encode(tokens, spk, tok_mask)
        pitch_pred = self.predict_pitch(h, spk, tok_mask)
        log_dur = self.predict_duration(h, spk, tok_mask)
        x = self.embed_pitch(h, pitch_pred if pitch is None else pitch, tok_mask)
        up, frame_lens = length_regulate_batch(x, durations, n_lens)
        mel_mask = sequence_mask(frame_lens, up.size(1))
        mel_pred = self.decode(up, spk, mel_mask)
        out = {"mel": mel_pred, "pitch": pitch_pred, "log_dur": log_dur,
               "tok_mask": tok_mask, "mel_mask": mel_mask, "t_lens": frame_lens}
        if with_alignment:
            if mel is None or t_lens is None:
                raise ModelInputError("alignment needs target mels and lengths")
            amask = sequence_mask(t_lens, mel.size(1))
            out["align"] = self.aligner(self.token_emb(tokens), mel, spk, tok_mask, amask)
        return out

    @torch.no_grad()
    def infer(self, tokens: torch.Tensor, spk: torch.Tensor, durations: Optional[torch.Tensor] = None,
              pitch: Optional[torch.Tensor] = None):
        """Single-utterance inference. Returns (mel (T, mel_dim), pitch (N,), durations (N,))."""
        tokens = torch.as_tensor(tokens, dtype=torch.long).reshape(1, -1)
        spk = spk.reshape(1, -1)
        mask = torch.ones_like(tokens, dtype=torch.bool)
        h = self.encode(tokens, spk, mask)
        p = self.predict_pitch(h, spk, mask) if pitch is None else torch.as_tensor(pitch, dtype=h.dtype)[None]
        if durations is None:
            d = self.rounded_durations(self.predict_duration(h, spk, mask))
        else:
            d = torch.as_tensor(durations, dtype=torch.long).reshape(1, -1)
        x = self.embed_pitch(h, p, mask)
        up = length_regulate(x[0], d[0])[None]
        mel = self.decode(up, spk, torch.ones(up.shape[:2], dtype=torch.bool))
        return mel[0], p[0], d[0]

    def param_names(self) -> Sequence[str]:
        return [n for n, _ in self.named_parameters()]
