"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Criteria 2, 6, 7 and 8 share one desk-scale experiment: 8 pre-training
speakers, 2 held-out speakers, 25 adaptation and 20 test utterances each.
"""
import copy
import hashlib
import json
import os
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from peftts import checkpoint as ckpt
from peftts.align import forward_sum_loss, viterbi_durations, viterbi_path
from peftts.cli import main as cli_main
from peftts.config import PeftConfig, RunConfig
from peftts.data import load_corpus, make_corpus
from peftts.inference import speaker_vector, synthesize
from peftts.metrics import frechet_gaussian
from peftts.model import AcousticModel
from peftts.peft import apply_delta, inject
from peftts.serialize import base_sha256, base_to_bytes, load_base, save_base
from peftts.train import adapt, pretrain

import test_gradients as grads
from helpers import ACCEPTANCE_LINES
from oracles import brute_forward_sum, brute_viterbi

STEPS = 1500
BUDGETS = [2, 8, 25]


@contextmanager
def criterion(n, title, budget_s=None):
    """Record and print PASS/FAIL for criterion ``n``; ``info`` collects details and extra runtime."""
    info = {"extra_s": 0.0, "detail": ""}
    t0 = time.perf_counter()
    try:
        yield info
        elapsed = time.perf_counter() - t0 + info["extra_s"]
        info["detail"] = (info["detail"] + f" runtime={elapsed:.1f}s").strip()
        if budget_s is not None:
            assert elapsed < budget_s, f"runtime {elapsed:.1f}s exceeds {budget_s}s"
    except BaseException as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        line = f"criterion {n}: FAIL {title} :: {msg} {info['detail']}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)
        raise
    line = f"criterion {n}: PASS {title} :: {info['detail']}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def _hash(t):
    return hashlib.sha256(t.detach().cpu().numpy().tobytes()).hexdigest()


class Experiment:
    """Pre-trained desk-default base plus lazily computed, cached adaptation runs."""

    def __init__(self, tmp):
        torch.set_num_threads(1)
        t0 = time.perf_counter()
        self.corpus = make_corpus(8, 50, 7, n_heldout=2, adapt_utts=max(BUDGETS), test_utts=20)
        self.run_cfg = RunConfig()
        self.pretrained = pretrain(self.corpus, self.run_cfg)
        self.base = self.pretrained.model
        self.base_path = os.path.join(tmp, "base.ckpt")
        self.sha = save_base(self.base, self.base_path)
        self.pretrain_s = time.perf_counter() - t0
        self.runs = {}
        self.initial = {}

    def adapt(self, speaker, strategy, n_utts):
        key = (speaker, strategy, n_utts)
        if key not in self.runs:
            c = self.corpus
            t0 = time.perf_counter()
            res = adapt(self.base, self.sha, PeftConfig(strategy=strategy), c.select(speaker, "adapt")[:n_utts],
                        c.pitch_mean, c.pitch_std, train=self.run_cfg.train, weights=self.run_cfg.loss,
                        steps=STEPS, eval_utts=c.select(speaker, "test"), eval_initial=speaker not in self.initial)
            if "initial" in res.report:
                self.initial[speaker] = res.report["initial"]
            self.runs[key] = (res, time.perf_counter() - t0)
        return self.runs[key]


@pytest.fixture(scope="module")
def exp(tmp_path_factory):
    return Experiment(str(tmp_path_factory.mktemp("acceptance")))


def _random_inputs(n, vocab, n_speakers, seed):
    rng = np.random.default_rng(seed)
    return [(rng.integers(0, vocab, size=int(rng.integers(1, 21))).tolist(), int(rng.integers(0, n_speakers)))
            for _ in range(n)]


@pytest.mark.slow
def test_criterion_1_identity_at_init(exp):
    with criterion(1, "identity at init (adapter, lora; 20 inputs each)", budget_s=10) as info:
        base = exp.base
        inputs = _random_inputs(20, base.cfg.vocab_size, base.speaker.n_speakers, seed=1)
        ref_utts = exp.corpus.select(exp.corpus.heldout_speakers[0], "adapt")
        checked = 0
        for strategy in ("adapter", "lora"):
            injected = inject(copy.deepcopy(base), PeftConfig(strategy=strategy)).eval()
            # a delta exported before any update step: the composed model at initialization
            delta = ckpt.loads(adapt(base, exp.sha, PeftConfig(strategy=strategy), ref_utts[:1], exp.corpus.pitch_mean,
                                     exp.corpus.pitch_std, steps=0, timing=False).delta)
            se_new = speaker_vector(apply_delta(base, exp.sha, delta))
            for tokens, spk in inputs:
                tok = torch.tensor(tokens)
                plain = base.infer(tok, base.speaker.pretrained([spk]).se_final[0])
                with_peft = injected.infer(tok, injected.speaker.pretrained([spk]).se_final[0])
                composed = synthesize(tokens, base, exp.sha, delta)
                plain_new = base.infer(tok, se_new)
                for a, b in zip(plain, with_peft):
                    assert torch.equal(a, b), f"{strategy}: pretrained-speaker output differs"
                for a, b in zip(plain_new, composed):
                    assert torch.equal(a, b), f"{strategy}: composed delta output differs"
                checked += 1
        info["detail"] = f"{checked} input/strategy pairs bit-identical"


@pytest.mark.slow
def test_criterion_2_no_forgetting(exp):
    with criterion(2, "no forgetting after a full adapt run", budget_s=120) as info:
        base = exp.base
        inputs = _random_inputs(4, base.cfg.vocab_size, 1, seed=2)
        before_bytes = base_to_bytes(base)
        before_hashes = {n: _hash(t) for n, t in base.state_dict().items()}

        def outputs():
            return [synthesize(tokens, base, exp.sha, None, speaker_id=s)
                    for s in range(base.speaker.n_speakers) for tokens, _ in inputs]

        before = outputs()
        speaker = exp.corpus.heldout_speakers[0]
        res = adapt(base, exp.sha, PeftConfig(strategy="lora"), exp.corpus.select(speaker, "adapt")[:25],
                    exp.corpus.pitch_mean, exp.corpus.pitch_std, steps=STEPS, timing=False)
        after = outputs()
        for x, y in zip(before, after):
            for a, b in zip(x, y):
                assert torch.equal(a, b), "pre-trained speaker output changed"
        assert base_to_bytes(base) == before_bytes and base_sha256(base) == exp.sha
        assert open(exp.base_path, "rb").read() == before_bytes
        adapted = res.model.state_dict()
        for name in res.trainable.frozen:
            assert _hash(adapted[name]) == before_hashes[name], f"frozen tensor {name} changed"
        for name, h in before_hashes.items():
            assert _hash(base.state_dict()[name]) == h
        info["detail"] = (f"{len(before)} syntheses bit-identical, {len(res.trainable.frozen)} frozen tensors hash-equal, "
                          f"{len(res.trainable.trainable)} trained")


def test_criterion_3_gradient_suite():
    with criterion(3, "analytic vs central-difference gradients, float64, rtol 1e-4", budget_s=180) as info:
        checks = {
            "attention": grads.test_attention,
            "conv_ff": grads.test_conv_feed_forward,
            "cln": grads.test_conditional_layer_norm,
            "adapter": grads.test_adapter,
            "lora": grads.test_lora,
            "prefix": grads.test_prefix,
            "pitch/duration predictor": lambda seed: grads.test_variance_predictor(seed, True),
            "forward_sum": grads.test_forward_sum,
            "end-to-end loss": grads.test_full_model_loss,
        }
        for name, fn in checks.items():
            for seed in range(5):
                try:
                    fn(seed)
                except AssertionError as e:
                    raise AssertionError(f"{name} seed {seed}: {str(e).splitlines()[0]}") from e
        info["detail"] = f"{len(checks)} components x 5 instances"


def test_criterion_4_dp_oracle():
    with criterion(4, "forward-sum and Viterbi vs brute-force enumeration", budget_s=30) as info:
        rng = np.random.default_rng(4)
        shapes = [(T, N) for N in range(1, 6) for T in range(N, 9)]
        worst = 0.0
        count = 0
        for T, N in shapes:
            for _ in range(100):
                m = rng.normal(size=(T, N)) * 2
                fs = float(forward_sum_loss(torch.from_numpy(m)))
                worst = max(worst, abs(fs - brute_forward_sum(m)))
                assert abs(fs - brute_forward_sum(m)) <= 1e-9, f"forward-sum T={T} N={N}"
                path, score = viterbi_path(m)
                ref_path, ref_score = brute_viterbi(m)
                assert abs(score - ref_score) <= 1e-9 and list(path) == list(ref_path), f"viterbi T={T} N={N}"
                d = viterbi_durations(m)
                assert d.sum() == T and d.min() >= 1
                count += 1
        info["detail"] = f"{len(shapes)} shapes x 100 matrices = {count}, max |err| {worst:.1e}"


def test_criterion_5_frechet():
    with criterion(5, "Frechet proxy identities") as info:
        rng = np.random.default_rng(5)
        for _ in range(20):
            d = int(rng.integers(1, 8))
            a, b = rng.normal(size=(d, d)), rng.normal(size=(d, d))
            s1, s2 = a @ a.T, b @ b.T
            mu1, mu2 = rng.normal(size=d), rng.normal(size=d)
            assert abs(frechet_gaussian(mu1, s1, mu1, s1)) <= 1e-8
            assert abs(frechet_gaussian(mu1, s1, mu2, s2) - frechet_gaussian(mu2, s2, mu1, s1)) <= 1e-8
        one_d = frechet_gaussian([0.0], [[1.0]], [1.0], [[1.0]])
        assert abs(one_d - 1.0) <= 1e-9
        info["detail"] = f"N(0,1) vs N(1,1) = {one_d!r}"


@pytest.mark.slow
def test_criterion_6_parameter_accounting(exp, capsys):
    with criterion(6, "parameter accounting via the params command") as info:
        cfg = exp.base.cfg
        d, r, a, L, rank = cfg.d_model, PeftConfig().adapter_bottleneck, cfg.align_dim, PeftConfig().prefix_len, PeftConfig().lora_rank
        n_fft = cfg.n_enc_layers + cfg.n_dec_layers
        mix = cfg.n_speakers
        adapter = lambda dim: 2 * dim + dim * r + r + r * dim + dim
        base_total = sum(p.numel() for p in exp.base.parameters())
        biases = sum(p.numel() for n, p in exp.base.named_parameters()
                     if n.rsplit(".", 1)[-1].startswith("bias") and not n.startswith("speaker."))
        expected = {
            "adapter": n_fft * adapter(d) + 4 * adapter(d) + 2 * adapter(a) + mix,
            "lora": n_fft * 2 * (rank * d + d * rank) + mix,
            "prefix": n_fft * 2 * L * d + mix,
            "bitfit": biases + mix,
        }
        totals = {k: base_total + mix + (v - mix if k in ("adapter", "lora", "prefix") else 0) for k, v in expected.items()}
        printed = {}
        for strategy in ("adapter", "lora", "prefix", "bitfit", "full"):
            capsys.readouterr()
            assert cli_main(["params", "--base", exp.base_path, "--strategy", strategy]) == 0
            out = capsys.readouterr().out
            printed[strategy] = json.loads(out)
        full_total = base_total + mix
        assert printed["full"]["params_trainable"] == printed["full"]["params_total"] == full_total
        for k, v in expected.items():
            assert printed[k]["params_trainable"] == v, f"{k}: {printed[k]['params_trainable']} != {v}"
            assert printed[k]["params_total"] == totals[k]
            assert v < 0.15 * full_total
        frac = printed["adapter"]["trainable_fraction"]
        assert frac < 0.10
        assert min(expected, key=expected.get) == "prefix"
        info["detail"] = (f"adapter {expected['adapter']}/{totals['adapter']} = {frac:.4f}; "
                          + ", ".join(f"{k} {v}" for k, v in expected.items() if k != "adapter")
                          + f", full {full_total}")


def _curve_ok(res):
    c = res.step_loss
    return np.mean(c[-100:]) < np.mean(c[:100])


@pytest.mark.slow
def test_criterion_7_adaptation_quality(exp):
    with criterion(7, "adapter vs un-adapted base and full fine-tune", budget_s=900) as info:
        info["extra_s"] = exp.pretrain_s
        rows, ada, full, base_mse, secs_a, secs_f = [], [], [], [], [], []
        for spk in exp.corpus.heldout_speakers:
            ra, ta = exp.adapt(spk, "adapter", 25)
            rf, tf = exp.adapt(spk, "full", 25)
            info["extra_s"] += ta + tf
            assert _curve_ok(ra) and _curve_ok(rf), "trailing-100 loss not below first-100 loss"
            base_mse.append(exp.initial[spk]["mel_mse"])
            ada.append(ra.report["mel_mse"])
            full.append(rf.report["mel_mse"])
            secs_a.append(ra.report["secs"])
            secs_f.append(rf.report["secs"])
            rows.append(f"spk{spk}: base {base_mse[-1]:.3f} adapter {ada[-1]:.3f} full {full[-1]:.3f}")
        m_base, m_ada, m_full = map(np.mean, (base_mse, ada, full))
        s_ada, s_full = np.mean(secs_a), np.mean(secs_f)
        info["detail"] = (f"mel MSE base {m_base:.4f} adapter {m_ada:.4f} full {m_full:.4f}; "
                          f"secs adapter {s_ada:.4f} full {s_full:.4f}; " + "; ".join(rows))
        assert m_ada < 0.5 * m_base, "adapter MSE not below half the un-adapted base"
        assert m_ada <= 2 * m_full, "adapter MSE above twice the full fine-tune"
        assert s_ada >= 0.9 * s_full, "adapter secs below 0.9 x full fine-tune"


@pytest.mark.slow
def test_criterion_8_data_budget(exp):
    with criterion(8, "held-out mel MSE non-increasing over {2, 8, 25} utterances", budget_s=1200) as info:
        info["extra_s"] = exp.pretrain_s
        mse = []
        for n in BUDGETS:
            vals = []
            for spk in exp.corpus.heldout_speakers:
                res, t = exp.adapt(spk, "adapter", n)
                info["extra_s"] += t
                assert _curve_ok(res), "trailing-100 loss not below first-100 loss"
                vals.append(res.report["mel_mse"])
            mse.append(float(np.mean(vals)))
        inversions = [(i, (mse[i + 1] - mse[i]) / mse[i]) for i in range(len(mse) - 1) if mse[i + 1] > mse[i]]
        info["detail"] = "mel MSE " + ", ".join(f"{n}: {v:.4f}" for n, v in zip(BUDGETS, mse))
        assert len(inversions) <= 1 and all(rel <= 0.05 for _, rel in inversions), f"inversions {inversions}"


@pytest.mark.slow
def test_generator_learnability(exp):
    """Full fine-tune of the base on one synthetic speaker removes > 90% of an untrained model's mel error."""
    torch.manual_seed(123)
    untrained = AcousticModel(exp.base.cfg).eval()
    for spk in exp.corpus.heldout_speakers:
        c = exp.corpus
        fresh = adapt(untrained, base_sha256(untrained), PeftConfig(strategy="full"), c.select(spk, "adapt")[:1],
                      c.pitch_mean, c.pitch_std, steps=0, eval_utts=c.select(spk, "test"), timing=False)
        tuned, _ = exp.adapt(spk, "full", 25)
        assert tuned.report["mel_mse"] < 0.1 * fresh.report["mel_mse"]


def _run_pipeline(root):
    """Every artifact-producing command once, single-threaded with fixed seeds."""
    os.makedirs(root, exist_ok=True)
    p = lambda name: os.path.join(root, name)
    steps = [
        ["gen-corpus", "--speakers", "3", "--utts", "6", "--seed", "9", "--heldout", "1", "--adapt-utts", "4",
         "--test-utts", "3", "--out", p("corpus.bin")],
        ["pretrain", "--corpus", p("corpus.bin"), "--out", p("base.ckpt"), "--epochs", "2", "--seed", "4",
         "--deterministic"],
        ["adapt", "--base", p("base.ckpt"), "--strategy", "lora", "--data", p("corpus.bin"), "--steps", "25",
         "--seed", "2", "--out", p("delta.ckpt"), "--report", p("adapt.json"), "--deterministic"],
        ["synth", "--base", p("base.ckpt"), "--delta", p("delta.ckpt"), "--text-ids", "3,1,4,1,5", "--out",
         p("synth.bin")],
        ["eval", "--base", p("base.ckpt"), "--delta", p("delta.ckpt"), "--testset", p("corpus.bin"), "--report",
         p("eval.json"), "--deterministic"],
    ]
    for argv in steps:
        assert cli_main(argv) == 0, argv
    return sorted(os.listdir(root))


def test_criterion_9_determinism_and_format(tmp_path, capsys):
    with criterion(9, "byte-identical reruns and write-read-write round trips") as info:
        files_a = _run_pipeline(str(tmp_path / "a"))
        files_b = _run_pipeline(str(tmp_path / "b"))
        capsys.readouterr()
        assert files_a == files_b
        for name in files_a:
            a = (tmp_path / "a" / name).read_bytes()
            assert a == (tmp_path / "b" / name).read_bytes(), f"{name} differs between runs"
        for name in ("base.ckpt", "delta.ckpt", "corpus.bin", "synth.bin"):
            raw = (tmp_path / "a" / name).read_bytes()
            c = ckpt.loads(raw)
            path = str(tmp_path / f"rewrite-{name}")
            ckpt.write_atomic(path, ckpt.dumps(c.tensors, c.kind, c.config, c.base_sha256))
            assert open(path, "rb").read() == raw, f"{name} write-read-write differs"
        model, sha = load_base(str(tmp_path / "a" / "base.ckpt"))
        assert base_to_bytes(model) == (tmp_path / "a" / "base.ckpt").read_bytes()
        assert len(load_corpus(str(tmp_path / "a" / "corpus.bin"))) == 3 * 6 + 4 + 3
        info["detail"] = f"{len(files_a)} artifacts identical across runs; 4 containers round-trip"
