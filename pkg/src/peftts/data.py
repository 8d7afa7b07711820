"""Procedural multi-speaker corpus: phonemes, mel frames, per-token pitch and durations.

Every value is a deterministic function of (corpus seed, speaker seed, utterance
seed). A fixed phoneme inventory (templates, base durations, pitch offsets) is
shared by all speakers; speakers differ by pitch level/range, speaking rate,
a spectral tilt and a small formant shift along the mel axis.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import checkpoint as ckpt

VOCAB_SIZE = 40
MEL_DIM = 20
INVENTORY_SEED = 20220101
MAX_DURATION = 20
RATE_RANGE = (0.5, 2.0)
# reference point for the pitch-dependent ripple, in Hz-like units
PITCH_REF = (170.0, 50.0)

SPLITS = ("train", "adapt", "test")


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]))


@dataclass(frozen=True)
class Inventory:
    templates: np.ndarray  # (vocab, mel_dim)
    base_dur: np.ndarray  # (vocab,) frames
    pitch_offset: np.ndarray  # (vocab,) Hz-like


def make_inventory(vocab_size: int = VOCAB_SIZE, mel_dim: int = MEL_DIM, seed: int = INVENTORY_SEED) -> Inventory:
    rng = _rng(seed, 0)
    raw = rng.normal(0.0, 1.0, size=(vocab_size, mel_dim + 2))
    # light smoothing along frequency so a formant shift is a small perturbation
    templates = (raw[:, :-2] + raw[:, 1:-1] + raw[:, 2:]) / np.sqrt(3.0)
    base_dur = rng.integers(2, 7, size=vocab_size).astype(np.float64)
    pitch_offset = rng.normal(0.0, 6.0, size=vocab_size)
    return Inventory(templates, base_dur, pitch_offset)


@dataclass
class SpeakerLatent:
    seed: int
    base_pitch: float
    pitch_range: float
    rate: float
    spectral_tilt: np.ndarray
    formant_shift: int

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "base_pitch": self.base_pitch,
            "pitch_range": self.pitch_range,
            "rate": self.rate,
            "spectral_tilt": [float(v) for v in self.spectral_tilt],
            "formant_shift": self.formant_shift,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpeakerLatent":
        return cls(int(d["seed"]), float(d["base_pitch"]), float(d["pitch_range"]), float(d["rate"]),
                   np.asarray(d["spectral_tilt"], dtype=np.float64), int(d["formant_shift"]))


def make_speaker(seed: int, mel_dim: int = MEL_DIM) -> SpeakerLatent:
    rng = _rng(seed, 1)
    base_pitch = float(rng.uniform(90.0, 250.0))
    pitch_range = float(rng.uniform(10.0, 40.0))
    rate = float(rng.uniform(0.6, 1.6))
    freq = np.linspace(-1.0, 1.0, mel_dim)
    slope = rng.uniform(-1.0, 1.0)
    bumps = rng.normal(0.0, 0.6, size=3)
    tilt = slope * freq + sum(b * np.cos((k + 1) * np.pi * (freq + 1.0) / 2.0) for k, b in enumerate(bumps))
    formant_shift = int(rng.integers(-2, 3))
    return SpeakerLatent(int(seed), base_pitch, pitch_range, rate, tilt, formant_shift)


@dataclass
class Utterance:
    speaker: int
    split: str
    tokens: np.ndarray  # (N,) int64
    durations: np.ndarray  # (N,) int64, each >= 1
    pitch: np.ndarray  # (N,) raw Hz-like units
    mel: np.ndarray  # (T, mel_dim) float32

    @property
    def n_tokens(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def n_frames(self) -> int:
        return int(self.mel.shape[0])


def pitch_contour(x: np.ndarray) -> np.ndarray:
    """Rise-fall with declination over relative position x in [0, 1)."""
    return np.sin(np.pi * x) - 0.5 * x


def render_utterance(tokens: Sequence[int], spk: SpeakerLatent, utt_seed: int, noise: float = 0.05,
                     inventory: Optional[Inventory] = None, jitter_seed: Optional[int] = None) -> Utterance:
    """Render one utterance. ``jitter_seed`` (defaults to ``utt_seed``) fixes the duration jitter alone."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("need a non-empty 1-D phoneme sequence")
    inv = inventory or _default_inventory(spk.spectral_tilt.shape[0])
    mel_dim = inv.templates.shape[1]
    N = tokens.size
    jr = _rng(utt_seed if jitter_seed is None else jitter_seed, 2)
    jitter = np.clip(np.exp(jr.normal(0.0, 0.1, size=N)), 0.8, 1.25)
    durations = np.clip(np.round(spk.rate * inv.base_dur[tokens] * jitter), 1, MAX_DURATION).astype(np.int64)

    rng = _rng(utt_seed, 3)
    pos = np.arange(N) / N
    pitch = (spk.base_pitch + spk.pitch_range * pitch_contour(pos) + inv.pitch_offset[tokens]
             + rng.normal(0.0, 2.0, size=N))

    bins = np.arange(mel_dim)
    ripple_shape = np.cos(2.0 * np.pi * bins / 6.0)
    frames = []
    for ph, d, p in zip(tokens, durations, pitch):
        env = np.roll(inv.templates[ph], spk.formant_shift) + spk.spectral_tilt
        env = env + 0.5 * ((p - PITCH_REF[0]) / PITCH_REF[1]) * ripple_shape
        frames.append(np.repeat(env[None, :], d, axis=0))
    mel = np.concatenate(frames, axis=0)
    if noise > 0:
        mel = mel + rng.normal(0.0, noise, size=mel.shape)
    return Utterance(-1, "", tokens, durations, pitch, mel.astype(np.float32))


_INVENTORIES: Dict[int, Inventory] = {}


def _default_inventory(mel_dim: int) -> Inventory:
    if mel_dim not in _INVENTORIES:
        _INVENTORIES[mel_dim] = make_inventory(VOCAB_SIZE, mel_dim)
    return _INVENTORIES[mel_dim]


def random_tokens(rng: np.random.Generator, vocab_size: int = VOCAB_SIZE, min_len: int = 6, max_len: int = 14) -> np.ndarray:
    n = int(rng.integers(min_len, max_len + 1))
    return rng.integers(0, vocab_size, size=n).astype(np.int64)


@dataclass
class Corpus:
    speakers: List[SpeakerLatent]
    heldout: List[bool]
    utterances: List[Utterance]
    seed: int
    pitch_mean: float = 0.0
    pitch_std: float = 1.0
    meta: Dict[str, object] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def pretrain_speakers(self) -> List[int]:
        return [i for i, h in enumerate(self.heldout) if not h]

    @property
    def heldout_speakers(self) -> List[int]:
        return [i for i, h in enumerate(self.heldout) if h]

    def select(self, speaker: Optional[int] = None, split: Optional[str] = None) -> List[Utterance]:
        return [u for u in self.utterances
                if (speaker is None or u.speaker == speaker) and (split is None or u.split == split)]

    def norm_pitch(self, pitch: np.ndarray) -> np.ndarray:
        return (np.asarray(pitch, dtype=np.float64) - self.pitch_mean) / self.pitch_std

    def manifest(self) -> dict:
        counts = {s: sum(1 for u in self.utterances if u.split == s) for s in SPLITS}
        return {
            "seed": self.seed,
            "vocab_size": VOCAB_SIZE,
            "mel_dim": int(self.utterances[0].mel.shape[1]) if self.utterances else MEL_DIM,
            "pitch_mean": self.pitch_mean,
            "pitch_std": self.pitch_std,
            "speakers": [dict(s.to_dict(), index=i, heldout=h)
                         for i, (s, h) in enumerate(zip(self.speakers, self.heldout))],
            "splits": counts,
            "n_utterances": len(self.utterances),
            **self.meta,
        }


def _utt_seed(corpus_seed: int, speaker: int, index: int) -> int:
    return int(np.random.SeedSequence([corpus_seed, speaker, index, 4]).generate_state(1)[0])


def make_corpus(n_speakers: int = 8, utts_per_speaker: int = 50, seed: int = 7, n_heldout: int = 0,
                adapt_utts: int = 100, test_utts: int = 20, noise: float = 0.05,
                mel_dim: int = MEL_DIM) -> Corpus:
    """Pre-training speakers get ``utts_per_speaker`` train utterances each; each
    held-out speaker gets ``adapt_utts`` adaptation and ``test_utts`` test utterances."""
    if n_speakers < 1 or utts_per_speaker < 1:
        raise ValueError("n_speakers and utts_per_speaker must be >= 1")
    if n_heldout < 0 or (n_heldout and (adapt_utts < 1 or test_utts < 1)):
        raise ValueError("held-out speakers need adapt_utts >= 1 and test_utts >= 1")
    total = n_speakers + n_heldout
    speaker_seeds = _rng(seed, 5).choice(2**31 - 1, size=total, replace=False)
    speakers = [make_speaker(int(s), mel_dim) for s in speaker_seeds]
    heldout = [i >= n_speakers for i in range(total)]
    inv = _default_inventory(mel_dim)
    utts: List[Utterance] = []
    for si in range(total):
        if heldout[si]:
            plan = ["adapt"] * adapt_utts + ["test"] * test_utts
        else:
            plan = ["train"] * utts_per_speaker
        for ui, split in enumerate(plan):
            useed = _utt_seed(seed, si, ui)
            tokens = random_tokens(_rng(useed, 6), inv.templates.shape[0])
            u = render_utterance(tokens, speakers[si], useed, noise, inv)
            u.speaker, u.split = si, split
            utts.append(u)
    train_pitch = np.concatenate([u.pitch for u in utts if u.split == "train"])
    return Corpus(speakers, heldout, utts, seed, float(train_pitch.mean()), float(train_pitch.std()))


def corpus_to_bytes(corpus: Corpus) -> bytes:
    us = corpus.utterances
    tensors = OrderedDict()
    tensors["n_tokens"] = np.array([u.n_tokens for u in us], dtype=np.float64)
    tensors["n_frames"] = np.array([u.n_frames for u in us], dtype=np.float64)
    tensors["speaker"] = np.array([u.speaker for u in us], dtype=np.float64)
    tensors["split"] = np.array([SPLITS.index(u.split) for u in us], dtype=np.float64)
    tensors["tokens"] = np.concatenate([u.tokens for u in us]).astype(np.float64)
    tensors["durations"] = np.concatenate([u.durations for u in us]).astype(np.float64)
    tensors["pitch"] = np.concatenate([u.pitch for u in us]).astype(np.float64)
    tensors["mel"] = np.concatenate([u.mel for u in us]).astype(np.float32)
    return ckpt.dumps(tensors, ckpt.KIND_DATA, corpus.manifest())


def corpus_from_checkpoint(c: ckpt.Checkpoint) -> Corpus:
    if c.kind != ckpt.KIND_DATA:
        raise ckpt.CheckpointError("not a corpus file")
    t = c.tensors
    m = c.config
    n_tok = t["n_tokens"].astype(np.int64)
    n_frm = t["n_frames"].astype(np.int64)
    tok_off = np.concatenate([[0], np.cumsum(n_tok)])
    frm_off = np.concatenate([[0], np.cumsum(n_frm)])
    utts = []
    for i in range(len(n_tok)):
        a, b = tok_off[i], tok_off[i + 1]
        utts.append(Utterance(
            speaker=int(t["speaker"][i]),
            split=SPLITS[int(t["split"][i])],
            tokens=t["tokens"][a:b].astype(np.int64),
            durations=t["durations"][a:b].astype(np.int64),
            pitch=t["pitch"][a:b].copy(),
            mel=t["mel"][frm_off[i]:frm_off[i + 1]].copy(),
        ))
    speakers = [SpeakerLatent.from_dict(s) for s in m["speakers"]]
    heldout = [bool(s["heldout"]) for s in m["speakers"]]
    return Corpus(speakers, heldout, utts, int(m["seed"]), float(m["pitch_mean"]), float(m["pitch_std"]))


def save_corpus(corpus: Corpus, path: str) -> None:
    """Write the tensor container and a ``<path>.json`` manifest sidecar."""
    raw = corpus_to_bytes(corpus)
    ckpt.write_atomic(path, raw)
    manifest = json.dumps(corpus.manifest(), indent=2, sort_keys=True) + "\n"
    ckpt.write_atomic(path + ".json", manifest.encode("utf-8"))


def load_corpus(path: str) -> Corpus:
    c, _ = ckpt.read_file(path)
    return corpus_from_checkpoint(c)
