"""Loss assembly, Adam with frozen-parameter masking, pre-training, adaptation and evaluation."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterator, List, Optional, Sequence

import numpy as np
import torch

from . import metrics
from .align import batch_prior, forward_sum_loss_batch, viterbi_durations
from .config import LossWeights, PeftConfig, RunConfig, TrainConfig
from .data import Corpus, Utterance
from .model import AcousticModel, sequence_mask
from .peft import TrainableSet, build_trainable_set, prepare_adaptation, set_trainable, count_parameters
from .serialize import delta_to_bytes

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


@dataclass
class Batch:
    tokens: torch.Tensor
    n_lens: torch.Tensor
    durations: torch.Tensor
    pitch: torch.Tensor
    mel: torch.Tensor
    t_lens: torch.Tensor
    speakers: torch.Tensor

    @property
    def tok_mask(self) -> torch.Tensor:
        return sequence_mask(self.n_lens, self.tokens.size(1))

    @property
    def mel_mask(self) -> torch.Tensor:
        return sequence_mask(self.t_lens, self.mel.size(1))


def collate(utts: Sequence[Utterance], pitch_mean: float, pitch_std: float,
            dtype: torch.dtype = torch.float32) -> Batch:
    B = len(utts)
    N = max(u.n_tokens for u in utts)
    T = max(u.n_frames for u in utts)
    M = utts[0].mel.shape[1]
    tokens = np.zeros((B, N), dtype=np.int64)
    durs = np.zeros((B, N), dtype=np.int64)
    pitch = np.zeros((B, N))
    mel = np.zeros((B, T, M), dtype=np.float64)
    for i, u in enumerate(utts):
        n, t = u.n_tokens, u.n_frames
        tokens[i, :n] = u.tokens
        durs[i, :n] = u.durations
        pitch[i, :n] = (u.pitch - pitch_mean) / pitch_std
        mel[i, :t] = u.mel
    return Batch(
        tokens=torch.from_numpy(tokens),
        n_lens=torch.tensor([u.n_tokens for u in utts]),
        durations=torch.from_numpy(durs),
        pitch=torch.from_numpy(pitch).to(dtype),
        mel=torch.from_numpy(mel).to(dtype),
        t_lens=torch.tensor([u.n_frames for u in utts]),
        speakers=torch.tensor([u.speaker for u in utts]),
    )


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean squared error over unmasked elements (mask is (B, L) over leading dims)."""
    if pred.shape != target.shape:
        raise TrainingError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    sq = (pred - target) ** 2
    if mask is None:
        return sq.mean()
    m = mask.to(sq.dtype)
    if sq.dim() == 3:
        return (sq * m[..., None]).sum() / (m.sum() * sq.size(-1))
    return (sq * m).sum() / m.sum()


def alignment_loss(align: torch.Tensor, t_lens: torch.Tensor, n_lens: torch.Tensor, prior_scale: float = 1.0) -> torch.Tensor:
    """Forward-sum loss of aligner scores plus the beta-binomial prior, per frame, batch-averaged."""
    prior = batch_prior(t_lens.tolist(), n_lens.tolist(), align.size(1), align.size(2), prior_scale, align.dtype)
    per_item = forward_sum_loss_batch(align + prior, t_lens, n_lens)
    return (per_item / t_lens.to(per_item.dtype)).mean()


def total_loss(mel_pred, mel, pitch_pred, pitch, log_dur, durations, weights: LossWeights,
               mel_mask=None, tok_mask=None, align=None, t_lens=None, n_lens=None, prior_scale: float = 1.0):
    """mel MSE + a * pitch MSE + b * log-duration MSE + c * alignment loss.

    Returns (loss, dict of the unweighted terms).
    """
    parts = {
        "mel": masked_mse(mel_pred, mel, mel_mask),
        "pitch": masked_mse(pitch_pred, pitch, tok_mask),
        "duration": masked_mse(log_dur, torch.log(durations.clamp(min=1).to(log_dur.dtype)), tok_mask),
    }
    loss = parts["mel"] + weights.pitch * parts["pitch"] + weights.duration * parts["duration"]
    if align is not None and weights.align > 0:
        parts["align"] = alignment_loss(align, t_lens, n_lens, prior_scale)
        loss = loss + weights.align * parts["align"]
    return loss, parts


class Adam:
    """Adam with bias correction over a fixed set of named trainable tensors.

    Tensors outside ``params`` are never touched; passing a gradient for one
    is an error.
    """

    def __init__(self, params: Dict[str, torch.Tensor], lr: float = 1e-3, betas=(0.9, 0.98), eps: float = 1e-9):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}

    @torch.no_grad()
    def step(self, grads: Dict[str, Optional[torch.Tensor]]) -> None:
        extra = set(grads) - set(self.params)
        if extra:
            raise TrainingError(f"gradients for non-trainable tensors: {sorted(extra)[:5]}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.sub_(self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps))


def _grads(loss: torch.Tensor, params: Dict[str, torch.Tensor]) -> Dict[str, Optional[torch.Tensor]]:
    names = list(params)
    gs = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    return dict(zip(names, gs))


def bucketed_batches(utts: Sequence[Utterance], batch_size: int, rng: np.random.Generator) -> List[List[Utterance]]:
    """Length-sorted chunks (ties broken randomly) in shuffled order."""
    keys = np.array([u.n_frames for u in utts], dtype=np.float64) + rng.uniform(0, 0.5, size=len(utts))
    order = np.argsort(keys, kind="stable")
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    rng.shuffle(chunks)
    return [[utts[j] for j in c] for c in chunks]


def cyclic_batches(utts: Sequence[Utterance], batch_size: int, rng: np.random.Generator) -> Iterator[List[Utterance]]:
    """Endless stream of minibatches drawn from successive random permutations."""
    size = min(batch_size, len(utts))
    buf: List[int] = []
    while True:
        while len(buf) < size:
            buf.extend(rng.permutation(len(utts)).tolist())
        yield [utts[j] for j in buf[:size]]
        buf = buf[size:]


def _step_loss(model: AcousticModel, b: Batch, spk: torch.Tensor, weights: LossWeights, use_align: bool,
               aligner_durations: bool):
    durations = b.durations
    out = None
    if use_align:
        out = model(b.tokens, b.n_lens, spk, durations, b.pitch, mel=b.mel, t_lens=b.t_lens, with_alignment=True)
        if aligner_durations:
            durations = viterbi_batch(out["align"].detach(), b.t_lens, b.n_lens, model.cfg.prior_scale)
            aligned = model(b.tokens, b.n_lens, spk, durations, b.pitch)
            aligned["align"] = out["align"]
            out = aligned
    else:
        out = model(b.tokens, b.n_lens, spk, durations, b.pitch)
    return total_loss(
        out["mel"], b.mel, out["pitch"], b.pitch, out["log_dur"], durations, weights,
        mel_mask=out["mel_mask"], tok_mask=out["tok_mask"], align=out.get("align"),
        t_lens=b.t_lens, n_lens=b.n_lens, prior_scale=model.cfg.prior_scale,
    )


def viterbi_batch(align: torch.Tensor, t_lens, n_lens, prior_scale: float = 1.0) -> torch.Tensor:
    prior = batch_prior(t_lens.tolist(), n_lens.tolist(), align.size(1), align.size(2), prior_scale, torch.float64)
    scores = (align.double() + prior).numpy()
    out = torch.zeros(align.size(0), align.size(2), dtype=torch.long)
    for i, (t, n) in enumerate(zip(t_lens.tolist(), n_lens.tolist())):
        out[i, :n] = torch.from_numpy(viterbi_durations(scores[i, :t, :n]))
    return out


@dataclass
class PretrainResult:
    model: AcousticModel
    epoch_loss: List[float]
    step_loss: List[float]


def pretrain(corpus: Corpus, run: RunConfig, epochs: Optional[int] = None,
             callback: Optional[Callable[[int, float], None]] = None) -> PretrainResult:
    """Train every parameter (model, speaker table, GST, aligner) on the train split."""
    train_utts = corpus.select(split="train")
    if not train_utts:
        raise TrainingError("corpus has no train split")
    speakers = corpus.pretrain_speakers
    if speakers != list(range(len(speakers))):
        raise TrainingError("pre-training speakers must be the leading corpus indices")
    tc = run.train
    epochs = tc.pretrain_epochs if epochs is None else epochs
    torch.manual_seed(run.seed)
    mcfg = replace(run.model, n_speakers=len(speakers), mel_dim=int(train_utts[0].mel.shape[1]))
    model = AcousticModel(mcfg)
    model.meta = {"pitch_mean": corpus.pitch_mean, "pitch_std": corpus.pitch_std,
                  "corpus_seed": corpus.seed, "seed": run.seed, "epochs": epochs}
    model.train()
    params = dict(model.named_parameters())
    opt = Adam(params, tc.pretrain_lr, (tc.beta1, tc.beta2), tc.eps)
    rng = np.random.default_rng(run.seed)
    use_align = run.loss.align > 0
    epoch_loss, step_loss = [], []
    for epoch in range(epochs):
        losses = []
        for chunk in bucketed_batches(train_utts, tc.pretrain_batch, rng):
            b = collate(chunk, corpus.pitch_mean, corpus.pitch_std, model.dtype)
            spk = model.speaker.from_reference(b.speakers, b.mel, b.t_lens).se_final
            loss, _ = _step_loss(model, b, spk, run.loss, use_align, tc.aligner_durations)
            opt.step(_grads(loss, params))
            losses.append(float(loss.detach()))
        step_loss.extend(losses)
        epoch_loss.append(float(np.mean(losses)))
        log.info("pretrain epoch %d loss %.5f", epoch, epoch_loss[-1])
        if callback is not None:
            callback(epoch, epoch_loss[-1])
    model.eval()
    refresh_se2_cache(model, corpus)
    return PretrainResult(model, epoch_loss, step_loss)


@torch.no_grad()
def refresh_se2_cache(model: AcousticModel, corpus: Corpus) -> None:
    """Per pre-trained speaker, the mean SE2 over its training utterances."""
    cache = torch.zeros_like(model.speaker.se2_cache)
    for s in corpus.pretrain_speakers:
        utts = corpus.select(speaker=s, split="train")
        b = collate(utts, corpus.pitch_mean, corpus.pitch_std, model.dtype)
        se2, _ = model.speaker.gst_encode(b.mel, b.t_lens)
        cache[s] = se2.mean(0)
    model.speaker.se2_cache.copy_(cache)


@torch.no_grad()
def evaluate(model: AcousticModel, utts: Sequence[Utterance], spk: Callable[[Batch], torch.Tensor],
             pitch_mean: float, pitch_std: float, batch_size: int = 16) -> Dict[str, float]:
    """Held-out metrics with ground-truth durations (for frame alignment) and predicted pitch."""
    was = model.training
    model.eval()
    sq_mel = n_mel = 0.0
    p_pred, p_true, d_pred, d_true = [], [], [], []
    gen, ref = [], []
    gen_frames: Dict[int, List[np.ndarray]] = {}
    ref_frames: Dict[int, List[np.ndarray]] = {}
    for i in range(0, len(utts), batch_size):
        chunk = list(utts[i:i + batch_size])
        b = collate(chunk, pitch_mean, pitch_std, model.dtype)
        out = model(b.tokens, b.n_lens, spk(b), b.durations)
        mm = out["mel_mask"].to(out["mel"].dtype)
        sq_mel += float((((out["mel"] - b.mel) ** 2) * mm[..., None]).sum())
        n_mel += float(mm.sum()) * b.mel.size(-1)
        for j, u in enumerate(chunk):
            n, t = u.n_tokens, u.n_frames
            pp = out["pitch"][j, :n].double().numpy()
            pt = b.pitch[j, :n].double().numpy()
            p_pred.append(pp)
            p_true.append(pt)
            d_pred.append(out["log_dur"][j, :n].double().numpy())
            d_true.append(np.log(u.durations.astype(np.float64)))
            gm = out["mel"][j, :t].double().numpy()
            rm = u.mel.astype(np.float64)
            gen.append((gm, pp))
            ref.append((rm, pt))
            gen_frames.setdefault(u.speaker, []).append(gm)
            ref_frames.setdefault(u.speaker, []).append(rm)
    model.train(was)
    return {
        "mel_mse": sq_mel / n_mel,
        "mse_p": metrics.mse_pitch(np.concatenate(p_pred), np.concatenate(p_true)),
        "mse_d": metrics.mse_duration(np.concatenate(d_pred), np.concatenate(d_true)),
        "secs": metrics.secs_proxy(gen, ref),
        "cfsd": metrics.cfsd_proxy({k: np.concatenate(v) for k, v in gen_frames.items()},
                                   {k: np.concatenate(v) for k, v in ref_frames.items()}),
    }


METRIC_KEYS = ("mel_mse", "mse_p", "mse_d", "secs", "cfsd")


def evaluate_by_speaker(model: AcousticModel, utts: Sequence[Utterance],
                        spk: Callable[[Batch], torch.Tensor], pitch_mean: float, pitch_std: float) -> Dict[str, object]:
    """Per-speaker metrics plus their unweighted averages."""
    groups: Dict[int, List[Utterance]] = {}
    for u in utts:
        groups.setdefault(u.speaker, []).append(u)
    per = {str(k): evaluate(model, groups[k], spk, pitch_mean, pitch_std) for k in sorted(groups)}
    out: Dict[str, object] = {k: float(np.mean([m[k] for m in per.values()])) for k in METRIC_KEYS}
    out["per_speaker"] = per
    return out


@dataclass
class AdaptResult:
    model: AcousticModel
    trainable: TrainableSet
    delta: bytes
    report: Dict[str, object]
    step_loss: List[float] = field(default_factory=list)


def new_speaker_embedding(model: AcousticModel, batch_size: int) -> torch.Tensor:
    return model.speaker.new_speaker().se_final.expand(batch_size, -1)


def adapt(base: AcousticModel, base_sha: bytes, peft_cfg: PeftConfig, adapt_utts: Sequence[Utterance],
          pitch_mean: float, pitch_std: float, train: Optional[TrainConfig] = None,
          weights: Optional[LossWeights] = None, steps: Optional[int] = None, lr: Optional[float] = None,
          seed: int = 0, eval_utts: Optional[Sequence[Utterance]] = None, eval_initial: bool = False,
          timing: bool = True) -> AdaptResult:
    """Adapt a copy of ``base`` to one new speaker, training only the strategy's tensors.

    ``base`` is deep-copied first and never written. The first adaptation
    utterance is the speaker's fixed SE2 reference and travels in the delta.
    """
    if not adapt_utts:
        raise TrainingError("empty adaptation set")
    tc = train or TrainConfig()
    weights = weights or LossWeights()
    steps = tc.adapt_steps if steps is None else steps
    lr = tc.adapt_lr if lr is None else lr
    t0 = time.perf_counter()
    torch.manual_seed(seed)
    model = copy.deepcopy(base)
    prepare_adaptation(model, peft_cfg, torch.from_numpy(adapt_utts[0].mel))
    tset = build_trainable_set(peft_cfg, model)
    set_trainable(model, tset)
    params = {n: p for n, p in model.named_parameters() if n in tset}
    opt = Adam(params, lr, (tc.beta1, tc.beta2), tc.eps)
    spk_fn = lambda b: new_speaker_embedding(model, b.tokens.size(0))

    initial = None
    if eval_initial and eval_utts:
        initial = evaluate_by_speaker(model, eval_utts, spk_fn, pitch_mean, pitch_std)

    use_align = tc.align_in_adapt and weights.align > 0
    rng = np.random.default_rng(seed)
    stream = cyclic_batches(list(adapt_utts), tc.adapt_batch, rng)
    model.train()
    step_loss = []
    for _ in range(steps):
        b = collate(next(stream), pitch_mean, pitch_std, model.dtype)
        loss, _ = _step_loss(model, b, spk_fn(b), weights, use_align, tc.aligner_durations and use_align)
        if params:
            opt.step(_grads(loss, params))
        step_loss.append(float(loss.detach()))
    model.eval()
    for p in model.parameters():
        p.requires_grad_(True)

    report: Dict[str, object] = {
        "strategy": peft_cfg.strategy,
        "params_total": count_parameters(model),
        "params_trainable": tset.count(model),
        "steps": steps,
        "n_adapt_utts": len(adapt_utts),
        "loss_curve": step_loss,
    }
    if eval_utts:
        report.update(evaluate_by_speaker(model, eval_utts, spk_fn, pitch_mean, pitch_std))
        if initial is not None:
            report["initial"] = initial
    report["wall_ms"] = int(round((time.perf_counter() - t0) * 1000)) if timing else 0
    delta = delta_to_bytes(model, base_sha, tset, peft_cfg, {"steps": steps, "lr": lr, "seed": seed,
                                                                   "speaker": int(adapt_utts[0].speaker)})
    return AdaptResult(model, tset, delta, report, step_loss)
