"""Monotonic text-to-frame alignment: prior, forward-sum loss, Viterbi durations, aligner."""
from __future__ import annotations

from functools import lru_cache
from typing import Optional

import numpy as np
import torch
from scipy.special import betaln, gammaln
from torch import nn
from torch.nn import functional as F

# Finite stand-in for log(0); keeps logaddexp gradients NaN-free.
NEG = -1e30


class AlignmentError(ValueError):
    pass


@lru_cache(maxsize=4096)
def _prior_cached(T: int, N: int, scale: float) -> np.ndarray:
    k = np.arange(N, dtype=np.float64)[None, :]
    t = np.arange(T, dtype=np.float64)[:, None]
    a = scale * (t + 1.0)
    b = scale * (T - t)
    n = N - 1
    log_comb = gammaln(n + 1.0) - gammaln(k + 1.0) - gammaln(n - k + 1.0)
    out = log_comb + betaln(k + a, n - k + b) - betaln(a, b)
    out.setflags(write=False)
    return out


def beta_binomial_prior(T: int, N: int, scale: float = 1.0) -> np.ndarray:
    """Log beta-binomial prior, shape (T, N).

    Row t is log PMF(k=n; N-1 trials, alpha=scale*(t+1), beta=scale*(T-t)),
    which slides its mass from the first token to the last as t goes 0 -> T-1.
    """
    if N < 1 or T < N:
        raise AlignmentError(f"prior needs T >= N >= 1, got T={T}, N={N}")
    return _prior_cached(int(T), int(N), float(scale)).copy()


def forward_sum_loss_batch(m: torch.Tensor, t_lens: torch.Tensor, n_lens: torch.Tensor) -> torch.Tensor:
    """Per-item negative log total score of all monotonic paths.

    ``m`` is (B, T, N) log-scores; items are valid on ``[:t_len, :n_len]``. Token
    padding needs no masking: a path ending at n_len-1 never visits later tokens.
    """
    if m.dim() != 3:
        raise AlignmentError("expected a (B, T, N) score tensor")
    if bool((t_lens < n_lens).any()) or bool((n_lens < 1).any()):
        raise AlignmentError("infeasible alignment: every item needs T >= N >= 1")
    B, T, N = m.shape
    neg = m.new_full((B, 1), NEG)
    f = torch.cat([m[:, 0, :1], m.new_full((B, N - 1), NEG)], dim=1)
    t_lens = t_lens.to(m.device)
    for t in range(1, T):
        shifted = torch.cat([neg, f[:, :-1]], dim=1)
        f_new = torch.logaddexp(f, shifted) + m[:, t]
        f = torch.where((t < t_lens)[:, None], f_new, f)
    return -f.gather(1, (n_lens.to(m.device) - 1).long()[:, None]).squeeze(1)


def forward_sum_loss(m: torch.Tensor) -> torch.Tensor:
    """Forward-sum loss of a single (T, N) score matrix."""
    T, N = m.shape
    if T < N:
        raise AlignmentError(f"no monotonic path: T={T} < N={N}")
    lens_t = torch.tensor([T])
    lens_n = torch.tensor([N])
    return forward_sum_loss_batch(m[None], lens_t, lens_n)[0]


def viterbi_path(m: np.ndarray) -> "tuple[np.ndarray, float]":
    """Best monotonic path (token index per frame) and its score."""
    m = np.asarray(m, dtype=np.float64)
    T, N = m.shape
    if N < 1 or T < N:
        raise AlignmentError(f"no monotonic path: T={T}, N={N}")
    score = np.full(N, -np.inf)
    score[0] = m[0, 0]
    moved = np.zeros((T, N), dtype=bool)
    for t in range(1, T):
        move = np.concatenate(([-np.inf], score[:-1]))
        take = move > score
        moved[t] = take
        score = np.where(take, move, score) + m[t]
    path = np.empty(T, dtype=np.int64)
    n = N - 1
    for t in range(T - 1, -1, -1):
        path[t] = n
        if t > 0 and moved[t, n]:
            n -= 1
    return path, float(score[N - 1])


def viterbi_durations(m: np.ndarray) -> np.ndarray:
    """Frames per token along the Viterbi path; sums to T, each >= 1."""
    path, _ = viterbi_path(m)
    return np.bincount(path, minlength=np.asarray(m).shape[1]).astype(np.int64)


class Aligner(nn.Module):
    """Learnable soft aligner.

    Text embeddings and mel frames are each conditioned on the speaker
    (concatenate + project), pushed through two convolutions into a shared
    space, and scored by negative squared distance.
    """

    def __init__(self, d_model: int, mel_dim: int, d_spk: int, align_dim: int = 32, kernel: int = 3):
        super().__init__()
        pad = kernel // 2
        self.text_in = nn.Linear(d_model + d_spk, d_model)
        self.text_conv1 = nn.Conv1d(d_model, d_model, kernel, padding=pad)
        self.text_conv2 = nn.Conv1d(d_model, align_dim, 1)
        self.mel_in = nn.Linear(mel_dim + d_spk, d_model)
        self.mel_conv1 = nn.Conv1d(d_model, d_model, kernel, padding=pad)
        self.mel_conv2 = nn.Conv1d(d_model, align_dim, 1)
        self.text_adapter: Optional[nn.Module] = None
        self.mel_adapter: Optional[nn.Module] = None

    @staticmethod
    def _branch(x, spk, proj, conv1, conv2, mask):
        x = proj(torch.cat([x, spk[:, None, :].expand(-1, x.size(1), -1)], dim=-1))
        x = x * mask[..., None]
        x = F.relu(conv1(x.transpose(1, 2)))
        x = conv2(x).transpose(1, 2)
        return x * mask[..., None]

    def forward(self, text_emb, mel, spk, text_mask, mel_mask):
        """Return (B, T, N) log-softmax alignment scores over tokens."""
        e = self._branch(text_emb, spk, self.text_in, self.text_conv1, self.text_conv2, text_mask)
        q = self._branch(mel, spk, self.mel_in, self.mel_conv1, self.mel_conv2, mel_mask)
        if self.text_adapter is not None:
            e = self.text_adapter(e) * text_mask[..., None]
        if self.mel_adapter is not None:
            q = self.mel_adapter(q) * mel_mask[..., None]
        dist = ((q[:, :, None, :] - e[:, None, :, :]) ** 2).sum(-1)
        logits = (-dist).masked_fill(~text_mask[:, None, :].bool(), -1e4)
        return F.log_softmax(logits, dim=-1)


def batch_prior(t_lens, n_lens, T: int, N: int, scale: float, dtype=torch.float32) -> torch.Tensor:
    """Stack per-item priors into a zero-padded (B, T, N) tensor."""
    out = np.zeros((len(t_lens), T, N))
    for i, (t, n) in enumerate(zip(t_lens, n_lens)):
        out[i, :t, :n] = _prior_cached(int(t), int(n), float(scale))
    return torch.as_tensor(out, dtype=dtype)
