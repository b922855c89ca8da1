"""End-to-end acceptance checks; each prints one PASS/FAIL line.

The ablation experiment (criteria 5, 6, 7 and 10) trains 3 seeds x 4 arms on
one shared corpus and takes roughly 20 minutes on a single CPU core.
"""

import math
import statistics
import time
import types

import numpy as np
import pytest

from qbslt import cli
from qbslt import config as config_mod
from qbslt import tensor as T
from qbslt.data import GeneratorConfig, generate as generate_corpus
from qbslt.metrics import bleu_n, clipped_precision, rouge
from qbslt.model import ModelConfig
from qbslt.nn import Linear
from qbslt.ssaw import SSAW, gate_summary
from qbslt.stage1 import (Stage1Config, contrastive_logits, mask_tokens, masked_recovery_accuracy,
                          reconstruction_loss, retrieval_accuracy, similarity_loss, symmetric_infonce, train_stage1)
from qbslt.stage2 import Stage2Config, evaluate_model, fusion_for_sample, train_stage2
from qbslt.tensor import Tensor
from qbslt.transformer import DecoderLayer, EncoderLayer, causal_bias, padding_bias
from test_metrics import curated_pairs, oracle_bleu, oracle_rouge

ABLATION_SEEDS = (0, 1, 2)
ABLATION_ARMS = ("ssaw", "concat", "question-only", "video-only")
ABLATION_EPOCHS = 40
STAGE1_STEPS = 300


# -- criterion 1: gradient suite -------------------------------------------------------------

def _leaf(rng, *shape, low=None):
    x = rng.normal(size=shape)
    if low is not None:
        x = np.sign(x) * (np.abs(x) + low)
    return Tensor(x, requires_grad=True)


def _weighted(out, rng):
    """Scalar probe: a fixed random projection of ``out()``."""
    w = rng.normal(size=out().shape)
    return lambda: T.sum_(out() * w)


def _op_instances():
    """name -> builder(rng) returning (scalar fn, inputs)."""

    def binary(op, positive_b=False):
        def build(rng):
            a = _leaf(rng, 2, 3)
            b = Tensor(np.abs(rng.normal(size=(3,))) + 0.5 if positive_b else rng.normal(size=(3,)),
                       requires_grad=True)
            return _weighted(lambda: op(a, b), rng), [a, b]
        return build

    def unary(op, positive=False, low=None):
        def build(rng):
            x = Tensor(np.abs(rng.normal(size=(2, 3))) + 0.5, requires_grad=True) if positive \
                else _leaf(rng, 2, 3, low=low)
            return _weighted(lambda: op(x), rng), [x]
        return build

    def matmul(rng):
        a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 2)
        return _weighted(lambda: T.matmul(a, b), rng), [a, b]

    def concat(rng):
        a, b = _leaf(rng, 2, 3), _leaf(rng, 1, 3)
        return _weighted(lambda: T.concat([a, b], axis=0), rng), [a, b]

    def select_index(rng):
        x = _leaf(rng, 4, 3)
        idx = rng.integers(0, 4, size=(2, 3))
        return _weighted(lambda: T.select_index(x, idx), rng), [x]

    def layer_norm(rng):
        x, g, b = _leaf(rng, 2, 5), _leaf(rng, 5), _leaf(rng, 5)
        return _weighted(lambda: T.layer_norm(x, g, b), rng), [x, g, b]

    def cross_entropy(rng):
        x = _leaf(rng, 2, 3, 5)
        targets = rng.integers(0, 5, size=(2, 3))
        targets[0, 0] = -100
        return (lambda: T.cross_entropy(x, targets, -100)), [x]

    def conv1d(rng):
        x, w, b = _leaf(rng, 2, 6, 2), _leaf(rng, 3, 2, 3), _leaf(rng, 3)
        pad = "edge" if rng.random() < 0.5 else "zeros"
        return _weighted(lambda: T.conv1d(x, w, b, padding=pad), rng), [x, w, b]

    def max_pool(rng):
        x = _leaf(rng, 2, 5, 3)
        return _weighted(lambda: T.max_pool1d(x, 2), rng), [x]

    return {
        "add": binary(T.add),
        "sub": binary(T.sub),
        "mul": binary(T.mul),
        "div": binary(T.div, positive_b=True),
        "power": unary(lambda x: T.power(x, 1.7), positive=True),
        "exp": unary(T.exp),
        "log": unary(T.log, positive=True),
        "relu": unary(T.relu, low=0.05),
        "sigmoid": unary(T.sigmoid),
        "matmul": matmul,
        "sum": unary(lambda x: T.sum_(x, axis=1)),
        "mean": unary(lambda x: T.mean(x, axis=0)),
        "mean_pool": unary(lambda x: T.mean_pool(x, 0)),
        "reshape": unary(lambda x: T.reshape(x, (3, 2))),
        "transpose": unary(lambda x: T.transpose(x, (1, 0))),
        "getitem": unary(lambda x: T.getitem(x, (slice(None), slice(1, 3)))),
        "concat": concat,
        "select_index": select_index,
        "softmax": unary(T.softmax),
        "log_softmax": unary(T.log_softmax),
        "layer_norm": layer_norm,
        "l2_normalize": unary(T.l2_normalize),
        "cross_entropy": cross_entropy,
        "conv1d": conv1d,
        "max_pool1d": max_pool,
    }


def _block_instances():
    def encoder_layer(rng):
        layer = EncoderLayer(4, 2, 4, rng)
        x = _leaf(rng, 1, 3, 4)
        bias = padding_bias(np.array([[True, True, rng.random() < 0.5]]))
        return _weighted(lambda: layer(x, bias), rng), [x] + layer.parameters()

    def decoder_layer(rng):
        layer = DecoderLayer(4, 2, 4, rng)
        x, mem = _leaf(rng, 1, 3, 4), _leaf(rng, 1, 2, 4)
        return _weighted(lambda: layer(x, mem, causal_bias(3), None), rng), [x, mem] + layer.parameters()

    def ssaw_block(rng):
        block = SSAW(4, 4, rng)
        q, v = _leaf(rng, 2, 4), _leaf(rng, 2, 4)
        return _weighted(lambda: block.fuse(q, v).fused, rng), [q, v] + block.parameters()

    def similarity(rng):
        heads = types.SimpleNamespace(proj_video=Linear(4, 4, rng), proj_text=Linear(4, 4, rng))
        v, s = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
        params = [v, s] + heads.proj_video.parameters() + heads.proj_text.parameters()
        return (lambda: similarity_loss(heads, v, s, 0.5)), params

    return {"encoder_layer": encoder_layer, "decoder_layer": decoder_layer, "ssaw_block": ssaw_block,
            "similarity_loss": similarity}


KINK_MARGIN = 1e-3


def _kink_distance(fn) -> float:
    """Smallest |input| seen by any ReLU during one forward pass of ``fn``."""
    seen = [math.inf]
    original = T.relu

    def spy(x):
        seen.append(float(np.abs(x.data).min()))
        return original(x)

    T.relu = spy
    try:
        fn()
    finally:
        T.relu = original
    return min(seen)


def _smooth_instance(build, rng):
    # central differences are only meaningful away from ReLU kinks; redraw otherwise
    while True:
        fn, inputs = build(rng)
        if _kink_distance(fn) > KINK_MARGIN:
            return fn, inputs


def test_criterion_1_gradient_suite(record_criterion):
    start = time.perf_counter()
    worst = {}
    for name, build in {**_op_instances(), **_block_instances()}.items():
        rng = np.random.default_rng(sum(map(ord, name)))
        errs = []
        for _ in range(100):
            fn, inputs = _smooth_instance(build, rng)
            errs.append(T.gradcheck(fn, inputs, step=1e-4))
        worst[name] = max(errs)
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if not v < 1e-3}
    ok = not bad and elapsed < 120
    record_criterion(1, ok, f"{len(worst)} ops/blocks x 100 instances, worst rel err "
                            f"{max(worst.values()):.2e}, {elapsed:.0f}s (limit 120s)" + (f", failing {bad}" if bad else ""))
    assert not bad
    assert elapsed < 120


# -- criterion 2: SSAW identities ---------------------------------------------------------

def test_criterion_2_ssaw_identities(record_criterion):
    rng = np.random.default_rng(2024)
    violations = 0
    for _ in range(1000):
        d = int(rng.choice([2, 4, 8]))
        m, n = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        block = SSAW(d, 2 * d, rng)
        q, v = rng.normal(size=(m, d)) * rng.uniform(0.1, 5), rng.normal(size=(n, d))
        q[rng.random(q.shape) < 0.1] = 0.0
        out = block.fuse(Tensor(q), Tensor(v))
        fc, g, f = np.concatenate([q, v]), out.gate.data, out.fused.data
        nz = fc != 0
        ok = (np.all((g > 0) & (g < 1)) and np.all(np.abs(f[nz]) < np.abs(fc[nz]))
              and np.all(np.sign(f[nz]) == np.sign(fc[nz])) and np.all(f[~nz] == 0))
        block.gate_override = 1.0
        ok = ok and np.array_equal(block.fuse(Tensor(q), Tensor(v)).fused.data, fc)
        violations += not ok
    record_criterion(2, violations == 0, f"{violations} violations over 1000 random inputs")
    assert violations == 0


# -- criterion 3: stage-1 alignment ---------------------------------------------------------

def test_criterion_3_stage1_alignment(record_criterion):
    b1 = symmetric_infonce(contrastive_logits(Tensor([[0.2, 1.0]]), Tensor([[-1.0, 0.4]]), 0.1)).item()
    eye = Tensor(np.eye(2))
    b2 = symmetric_infonce(contrastive_logits(eye, eye, 1.0)).item()
    closed = abs(b1) < 1e-12 and abs(b2 - (-math.log(math.e / (math.e + 1)))) < 1e-9

    start = time.perf_counter()
    gcfg = GeneratorConfig(n_train=64, n_dev=1, n_test=1, frame_dim=16, seed=0)
    pairs = generate_corpus(gcfg)["train"]
    mcfg = ModelConfig(vocab_size=gcfg.vocab_size, frame_dim=16, d_model=64)
    steps = 200
    model, _ = train_stage1(pairs, mcfg, Stage1Config(steps=steps, batch_size=64))
    v2t, t2v = retrieval_accuracy(model, pairs)
    elapsed = time.perf_counter() - start
    ok = closed and v2t >= 0.9 and t2v >= 0.9 and steps <= 2000 and elapsed < 300
    record_criterion(3, ok, f"retrieval v->t {v2t:.3f} t->v {t2v:.3f} after {steps} steps in {elapsed:.0f}s; "
                            f"B=1 loss {b1:.1e}, identity B=2 loss {b2:.12f}")
    assert closed and v2t >= 0.9 and t2v >= 0.9 and elapsed < 300


# -- criterion 4: masked reconstruction -------------------------------------------------------

def test_criterion_4_masked_reconstruction(record_criterion):
    gcfg = GeneratorConfig(n_train=10, n_dev=1, n_test=1, seed=3)
    sentences = generate_corpus(gcfg)["train"]
    mcfg = ModelConfig(vocab_size=gcfg.vocab_size, frame_dim=gcfg.frame_dim)
    model, _ = train_stage1(sentences, mcfg, Stage1Config(steps=200, batch_size=10))
    accs = [masked_recovery_accuracy(model, sentences, 0.15, seed) for seed in range(20)]
    acc = float(np.nanmean(accs))
    seqs = [s.translation for s in sentences]
    masked, targets = zip(*(mask_tokens(s, 0.0, 0) for s in seqs))
    zero = reconstruction_loss(model, masked, targets, seqs).item()
    ok = acc >= 0.8 and zero == 0.0
    record_criterion(4, ok, f"masked-token recovery {acc:.3f} (need >= 0.80); ratio-0 loss {zero}")
    assert acc >= 0.8 and zero == 0.0


# -- criteria 5, 6, 7, 10: one shared ablation experiment -------------------------------------

@pytest.fixture(scope="module")
def ablation():
    gcfg = GeneratorConfig(content_vocab=50, distractor_vocab=50, rho=0.8, n_train=500, n_dev=100, n_test=100,
                           seed=0)
    corpus = generate_corpus(gcfg)
    results = {arm: [] for arm in ABLATION_ARMS}
    seconds = {arm: 0.0 for arm in ABLATION_ARMS}
    seconds["stage1"] = 0.0
    histories, gates = [], []
    for seed in ABLATION_SEEDS:
        mcfg = ModelConfig(vocab_size=gcfg.vocab_size, frame_dim=gcfg.frame_dim, seed=seed)
        start = time.perf_counter()
        stage1_model, _ = train_stage1(corpus["train"], mcfg, Stage1Config(steps=STAGE1_STEPS, seed=seed))
        state = stage1_model.state_dict()
        seconds["stage1"] += time.perf_counter() - start
        for arm in ABLATION_ARMS:
            start = time.perf_counter()
            run = train_stage2(corpus["train"], state, mcfg,
                               Stage2Config(epochs=ABLATION_EPOCHS, fusion=arm, seed=seed),
                               dev=corpus["dev"])
            report, _ = evaluate_model(run.model, corpus["test"], arm)
            seconds[arm] += time.perf_counter() - start
            results[arm].append(100 * report.B4)
            histories.append((arm, seed, run.history))
            if arm == "ssaw":
                gates += [gate_summary(fusion_for_sample(run.model, s, arm), s.informative_mask, s.question.ids)
                          for s in corpus["test"]]
    return types.SimpleNamespace(results=results, seconds=seconds, histories=histories, gates=gates)


def test_criterion_5_ssaw_beats_concat(ablation, record_criterion):
    ssaw = statistics.median(ablation.results["ssaw"])
    concat = statistics.median(ablation.results["concat"])
    elapsed = sum(ablation.seconds[k] for k in ("stage1", "ssaw", "concat"))
    ok = ssaw - concat >= 2.0 and elapsed < 1800
    record_criterion(5, ok, f"median B4 ssaw {ssaw:.2f} vs concat {concat:.2f} (delta {ssaw - concat:+.2f}, "
                            f"need >= +2); per seed ssaw {_fmt(ablation.results['ssaw'])} concat "
                            f"{_fmt(ablation.results['concat'])}; {elapsed / 60:.1f} min")
    assert ssaw - concat >= 2.0
    assert elapsed < 1800


def test_criterion_6_gate_separation(ablation, record_criterion):
    informative = float(np.nanmean([g["mean_gate_informative"] for g in ablation.gates]))
    distractor = float(np.nanmean([g["mean_gate_distractor"] for g in ablation.gates]))
    video = float(np.nanmean([g["mean_gate_video"] for g in ablation.gates]))
    ok = informative - distractor > 0.05
    record_criterion(6, ok, f"mean gate informative {informative:.4f} distractor {distractor:.4f} "
                            f"(delta {informative - distractor:+.4f}, need > 0.05); video {video:.4f}")
    assert informative - distractor > 0.05


def test_criterion_7_loss_identity(ablation, record_criterion):
    steps = sum(len(h) for _, _, h in ablation.histories)
    bad = sum(total != l_d + l_s for _, _, h in ablation.histories for _, l_d, l_s, total in h)
    record_criterion(7, bad == 0, f"L_total == L_D + L_S on {steps - bad}/{steps} logged steps")
    assert bad == 0


def test_criterion_10_both_modalities_win(ablation, record_criterion):
    med = {arm: statistics.median(v) for arm, v in ablation.results.items()}
    ok = med["ssaw"] > med["question-only"] and med["ssaw"] > med["video-only"]
    record_criterion(10, ok, "median B4 " + ", ".join(f"{k} {v:.2f}" for k, v in med.items()))
    assert ok


def _fmt(values):
    return "[" + ", ".join(f"{v:.2f}" for v in values) + "]"


# -- criterion 8: metric oracles ------------------------------------------------------------

def test_criterion_8_metric_oracles(record_criterion):
    pairs = curated_pairs()
    worst = 0.0
    for hyp, ref in pairs:
        for n in range(1, 5):
            worst = max(worst, abs(bleu_n([hyp], [ref], n) - oracle_bleu([hyp], [ref], n)))
        worst = max(worst, abs(rouge([hyp], [ref]) - oracle_rouge([hyp], [ref])))
    hyps, refs = [h for h, _ in pairs], [r for _, r in pairs]
    for n in range(1, 5):
        worst = max(worst, abs(bleu_n(hyps, refs, n) - oracle_bleu(hyps, refs, n)))
    worst = max(worst, abs(rouge(hyps, refs) - oracle_rouge(hyps, refs)))
    matches, total = clipped_precision([pairs[0][0]], [pairs[0][1]], 1)
    clip_value = matches / total
    lcs_f = rouge([["a", "b", "c"]], [["a", "c", "d"]])
    ok = worst < 1e-9 and abs(clip_value - 2 / 7) < 1e-12 and abs(lcs_f - 2 / 3) < 1e-12
    record_criterion(8, ok, f"{len(pairs)} curated pairs, worst |impl - oracle| {worst:.1e}; "
                            f"clipped precision {clip_value:.6f} (2/7), LCS F {lcs_f:.6f} (2/3)")
    assert ok


# -- criterion 9: determinism ---------------------------------------------------------------

def test_criterion_9_determinism(tmp_path, monkeypatch, record_criterion):
    overrides = ["n_train=48", "n_dev=8", "n_test=8", "s1_steps=10", "epochs=2"]
    steps = [
        ("gen-data", []),
        ("pretrain", ["run_dir=s1"]),
        ("train", ["run_dir=s2", "stage1_checkpoint=s1/stage1.ckpt"]),
        ("evaluate", ["run_dir=ev", "checkpoint=s2/stage2.ckpt"]),
    ]
    produced = {}
    for tag in ("a", "b"):
        root = tmp_path / tag
        monkeypatch.setenv(config_mod.RUN_ROOT_ENV, str(root))
        for command, extra in steps:
            argv = [command, "--seed", "7"]
            for item in overrides + extra:
                argv += ["--set", item]
            assert cli.main(argv) == 0, command
        produced[tag] = {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
    same = produced["a"] == produced["b"]
    differing = sorted(str(k) for k in produced["a"] if produced["a"][k] != produced["b"].get(k))
    record_criterion(9, same, f"{len(produced['a'])} artifacts from gen-data, pretrain, train, evaluate "
                              f"byte-identical across two runs" + (f"; differing {differing}" if differing else ""))
    assert same
