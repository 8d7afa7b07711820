"""Objective metrics: pitch/duration MSE, speaker-similarity and Frechet-distance proxies."""
from __future__ import annotations

import warnings
from typing import Dict, Iterable, Mapping, Sequence, Tuple

import numpy as np


class RankWarning(UserWarning):
    """Too few frames for a full covariance estimate."""


def mse_pitch(pred, target) -> float:
    """Mean squared error between predicted and reference (z-scored) pitch."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def mse_duration(pred_log, target_log) -> float:
    """Mean squared error between log-durations."""
    return mse_pitch(pred_log, target_log)


def utterance_signature(mel, pitch) -> np.ndarray:
    """[frame-mean mel | frame-std mel | mean pitch | pitch std]."""
    mel = np.asarray(mel, dtype=np.float64)
    pitch = np.asarray(pitch, dtype=np.float64)
    return np.concatenate([mel.mean(0), mel.std(0), [pitch.mean()], [pitch.std()]])


def _signatures(items) -> np.ndarray:
    if isinstance(items, np.ndarray) and items.ndim == 2:
        return items.astype(np.float64)
    return np.stack([utterance_signature(mel, pitch) for mel, pitch in items])


def secs_proxy(generated, reference) -> float:
    """Cosine similarity between the mean utterance signatures of two sets.

    Each argument is a sequence of ``(mel, pitch)`` pairs or an already
    computed (n, dim) signature matrix.
    """
    a = _signatures(generated).mean(0)
    b = _signatures(reference).mean(0)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0.0:
        return 0.0
    return float(np.clip(a @ b / denom, -1.0, 1.0))


def _sym_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_gaussian(mu1, sigma1, mu2, sigma2) -> float:
    """Frechet distance between N(mu1, sigma1) and N(mu2, sigma2).

    Covariances are symmetrized and negative eigenvalues clamped, and all
    square roots use symmetric eigendecompositions.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, dtype=np.float64)), np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    s1 = np.atleast_2d(np.asarray(sigma1, dtype=np.float64))
    s2 = np.atleast_2d(np.asarray(sigma2, dtype=np.float64))
    s1 = (s1 + s1.T) / 2
    s2 = (s2 + s2.T) / 2
    r1 = _sym_sqrt(s1)
    inner = r1 @ s2 @ r1
    inner = (inner + inner.T) / 2
    tr_cross = np.sqrt(np.clip(np.linalg.eigvalsh(inner), 0.0, None)).sum()
    diff = mu1 - mu2
    d = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_cross)
    return max(d, 0.0)


def gaussian_stats(frames: np.ndarray, diagonal: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    frames = np.asarray(frames, dtype=np.float64)
    mu = frames.mean(0)
    if diagonal:
        return mu, np.diag(frames.var(0, ddof=1) if len(frames) > 1 else np.zeros(frames.shape[1]))
    return mu, np.cov(frames, rowvar=False)


def cfsd_proxy(generated: Mapping[object, np.ndarray], reference: Mapping[object, np.ndarray]) -> float:
    """Per-speaker Frechet distance of mel-frame statistics, averaged over speakers.

    ``generated[k]`` and ``reference[k]`` are (frames, mel_dim) stacks for speaker k.
    """
    keys = sorted(reference, key=str)
    if not keys or set(keys) != set(generated):
        raise ValueError("generated and reference must cover the same non-empty speaker set")
    scores = []
    for k in keys:
        g, r = np.asarray(generated[k]), np.asarray(reference[k])
        dim = r.shape[1]
        diagonal = min(len(g), len(r)) < dim + 1
        if diagonal:
            warnings.warn(f"speaker {k}: fewer than {dim + 1} frames; using diagonal covariances", RankWarning)
        scores.append(frechet_gaussian(*gaussian_stats(g, diagonal), *gaussian_stats(r, diagonal)))
    return float(np.mean(scores))
