"""Command-line entry points.

Every command writes its artifact atomically and prints a one-line JSON
summary. Exit codes: 0 ok, 1 runtime failure, 2 usage/config error,
3 incompatible delta.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from collections import OrderedDict
from typing import List, Optional

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import ConfigError, PeftConfig, RunConfig, STRATEGIES, to_dict
from .data import load_corpus, make_corpus, save_corpus
from .inference import speaker_vector
from .peft import build_trainable_set, prepare_adaptation, count_parameters
from .serialize import compose, load_base, load_delta, save_base
from .train import adapt, evaluate_by_speaker, pretrain

ADAPT_STRATEGIES = tuple(s for s in STRATEGIES if s != "none")


class UsageError(Exception):
    pass


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


def _write_json(path: str, obj: dict) -> None:
    ckpt.write_atomic(path, (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode("utf-8"))


def _positive(name):
    def parse(text):
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer")
        if v < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1")
        return v
    return parse


def _single_thread(deterministic: bool) -> None:
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _load_run(path: Optional[str]) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def cmd_gen_corpus(args) -> None:
    corpus = make_corpus(args.speakers, args.utts, args.seed, n_heldout=args.heldout,
                         adapt_utts=args.adapt_utts, test_utts=args.test_utts)
    save_corpus(corpus, args.out)
    _emit({"command": "gen-corpus", "out": args.out, "samples": len(corpus),
           "speakers": args.speakers, "heldout": args.heldout, "seed": args.seed})


def cmd_pretrain(args) -> None:
    _single_thread(args.deterministic)
    run = _load_run(args.config)
    if args.seed is not None:
        run.seed = args.seed
    corpus = load_corpus(args.corpus)
    res = pretrain(corpus, run, epochs=args.epochs)
    sha = save_base(res.model, args.out)
    _emit({"command": "pretrain", "out": args.out, "sha256": sha.hex(),
           "initial_loss": res.epoch_loss[0] if res.epoch_loss else None,
           "final_loss": res.epoch_loss[-1] if res.epoch_loss else None,
           "params_total": count_parameters(res.model)})


def _heldout_speaker(corpus, speaker: Optional[int]) -> int:
    held = corpus.heldout_speakers
    if speaker is None:
        if not held:
            raise UsageError("corpus has no held-out speakers; regenerate with --heldout")
        return held[0]
    if speaker not in held:
        raise UsageError(f"speaker {speaker} is not a held-out speaker (held-out: {held})")
    return speaker


def cmd_adapt(args) -> None:
    _single_thread(args.deterministic)
    run = _load_run(args.config)
    peft_cfg = run.peft
    peft_cfg.strategy = args.strategy
    peft_cfg.validate()
    seed = run.seed if args.seed is None else args.seed
    base, sha = load_base(args.base)
    corpus = load_corpus(args.data)
    spk = _heldout_speaker(corpus, args.speaker)
    pool = corpus.select(spk, "adapt")
    utts = pool[: args.utts]
    res = adapt(base, sha, peft_cfg, utts, corpus.pitch_mean, corpus.pitch_std, train=run.train,
                weights=run.loss, steps=args.steps, lr=args.lr, seed=seed,
                eval_utts=corpus.select(spk, "test"), timing=not args.deterministic)
    ckpt.write_atomic(args.out, res.delta)
    report = dict(res.report, speaker=spk)
    if args.report:
        _write_json(args.report, report)
    _emit({"command": "adapt", "out": args.out, "strategy": args.strategy, "speaker": spk,
           "params_trainable": report["params_trainable"], "params_total": report["params_total"],
           "delta_bytes": len(res.delta), **{k: report[k] for k in ("mse_p", "mse_d", "secs", "cfsd") if k in report}})


def _parse_ids(text: str) -> List[int]:
    try:
        ids = [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise UsageError(f"--text-ids must be comma-separated integers, got {text!r}")
    if not ids:
        raise UsageError("--text-ids is empty")
    return ids


def cmd_synth(args) -> None:
    base, sha = load_base(args.base)
    delta = load_delta(args.delta) if args.delta else None
    model = compose(base, sha, delta)
    ids = _parse_ids(args.text_ids)
    if delta is None and not 0 <= args.speaker_id < model.speaker.n_speakers:
        raise UsageError(f"--speaker-id must be in [0, {model.speaker.n_speakers})")
    mel, pitch, durs = model.infer(torch.tensor(ids), speaker_vector(model, args.speaker_id))
    tensors = OrderedDict(
        mel=mel.numpy(), pitch=pitch.numpy(), durations=durs.numpy().astype(np.float64),
    )
    ckpt.write_atomic(args.out, ckpt.dumps(tensors, ckpt.KIND_DATA, {"text_ids": ids}))
    _emit({"command": "synth", "out": args.out, "frames": int(mel.shape[0]), "tokens": len(ids),
           "delta": bool(args.delta)})


def cmd_eval(args) -> None:
    _single_thread(args.deterministic)
    t0 = time.perf_counter()
    base, sha = load_base(args.base)
    corpus = load_corpus(args.testset)
    if args.delta:
        delta = load_delta(args.delta)
        model = compose(base, sha, delta)
        spk = _heldout_speaker(corpus, args.speaker if args.speaker is not None else delta.config.get("speaker"))
        utts = corpus.select(spk, "test")
        vec = speaker_vector(model)
        spk_fn = lambda b: vec.expand(b.tokens.size(0), -1)
        trainable = build_trainable_set(PeftConfig.from_dict(delta.config["peft"]), model).count(model)
    else:
        model = base
        speakers = corpus.pretrain_speakers if args.speaker is None else [args.speaker]
        if any(s >= model.speaker.n_speakers for s in speakers):
            raise UsageError("without --delta only pre-trained speakers can be evaluated")
        utts = [u for u in corpus.utterances if u.speaker in speakers]
        if args.max_utts:
            utts = [u for s in speakers for u in [v for v in utts if v.speaker == s][: args.max_utts]]
        spk_fn = lambda b: model.speaker.pretrained(b.speakers).se_final
        trainable = 0
    if not utts:
        raise UsageError("no evaluation utterances selected")
    report = evaluate_by_speaker(model, utts, spk_fn, corpus.pitch_mean, corpus.pitch_std)
    report.update(params_total=count_parameters(model), params_trainable=trainable,
                  steps=int(delta.config.get("steps", 0)) if args.delta else 0,
                  wall_ms=0 if args.deterministic else int(round((time.perf_counter() - t0) * 1000)))
    _write_json(args.report, report)
    _emit({"command": "eval", "report": args.report,
           **{k: report[k] for k in ("mse_p", "mse_d", "secs", "cfsd", "mel_mse")}})


def cmd_params(args) -> None:
    base, _ = load_base(args.base)
    run = _load_run(args.config)
    cfg = run.peft
    cfg.strategy = args.strategy
    cfg.validate()
    prepare_adaptation(base, cfg, torch.zeros(1, base.cfg.mel_dim, dtype=base.dtype))
    tset = build_trainable_set(cfg, base)
    total = count_parameters(base)
    n = tset.count(base)
    _emit({"command": "params", "strategy": args.strategy, "params_total": total,
           "params_trainable": n, "trainable_fraction": n / total})


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="peftts", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="generate a synthetic multi-speaker corpus")
    g.add_argument("--speakers", type=_positive("--speakers"), default=8)
    g.add_argument("--utts", type=_positive("--utts"), default=50)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--heldout", type=int, default=0, help="extra unseen speakers for adaptation")
    g.add_argument("--adapt-utts", type=_positive("--adapt-utts"), default=100)
    g.add_argument("--test-utts", type=_positive("--test-utts"), default=20)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("pretrain", help="pre-train the multi-speaker base model")
    t.add_argument("--config")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--deterministic", action="store_true")
    t.set_defaults(func=cmd_pretrain)

    a = sub.add_parser("adapt", help="adapt the frozen base to one held-out speaker")
    a.add_argument("--base", required=True)
    a.add_argument("--strategy", choices=ADAPT_STRATEGIES, required=True)
    a.add_argument("--data", required=True, help="corpus file with held-out speakers")
    a.add_argument("--speaker", type=int)
    a.add_argument("--utts", type=_positive("--utts"), default=25)
    a.add_argument("--steps", type=int)
    a.add_argument("--lr", type=float)
    a.add_argument("--config")
    a.add_argument("--seed", type=int)
    a.add_argument("--out", required=True)
    a.add_argument("--report")
    a.add_argument("--deterministic", action="store_true",
                   help="single-threaded deterministic kernels; wall_ms is reported as 0")
    a.set_defaults(func=cmd_adapt)

    s = sub.add_parser("synth", help="synthesize a mel spectrogram")
    s.add_argument("--base", required=True)
    s.add_argument("--delta")
    s.add_argument("--text-ids", required=True)
    s.add_argument("--speaker-id", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="objective metrics on a test set")
    e.add_argument("--base", required=True)
    e.add_argument("--delta")
    e.add_argument("--testset", required=True)
    e.add_argument("--speaker", type=int)
    e.add_argument("--max-utts", type=int, default=0)
    e.add_argument("--report", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--deterministic", action="store_true")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("params", help="trainable-parameter accounting for a strategy")
    c.add_argument("--base", required=True)
    c.add_argument("--strategy", choices=ADAPT_STRATEGIES, required=True)
    c.add_argument("--config")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_params)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    # inference paths draw no random numbers; seeding keeps every command reproducible regardless
    if getattr(args, "seed", None) is not None:
        torch.manual_seed(args.seed)
    try:
        args.func(args)
    except ckpt.IncompatibleDeltaError as e:
        print(f"error: incompatible delta ({e})", file=sys.stderr)
        return 3
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
