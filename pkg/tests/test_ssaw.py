import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qbslt import tensor as T
from qbslt.ssaw import SSAW, FusionOutput, gate_summary
from qbslt.tensor import Tensor


@pytest.fixture
def block():
    return SSAW(8, 16, np.random.default_rng(11))


def test_fused_shapes_and_boundary(block):
    rng = np.random.default_rng(0)
    out = block.fuse(Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(5, 8))))
    assert out.fused.shape == (8, 8) and out.gate.shape == (8, 8)
    assert out.boundary == 3


def test_identity_gate_hook(block):
    rng = np.random.default_rng(1)
    q, v = rng.normal(size=(3, 8)), rng.normal(size=(2, 8))
    block.gate_override = 1.0
    out = block.fuse(Tensor(q), Tensor(v))
    assert np.array_equal(out.fused.data, np.concatenate([q, v]))


def test_d_model_mismatch(block):
    with pytest.raises(ValueError):
        block.fuse(Tensor(np.ones((2, 8))), Tensor(np.ones((2, 6))))


def test_empty_side_rejected(block):
    with pytest.raises(ValueError):
        block.fuse(Tensor(np.ones((0, 8))), Tensor(np.ones((2, 8))))


def _ln(row, gamma, beta, eps):
    mu = sum(row) / len(row)
    var = sum((x - mu) ** 2 for x in row) / len(row)
    return [g * (x - mu) / math.sqrt(var + eps) + b for x, g, b in zip(row, gamma, beta)]


def _mm(a, b):
    return [[sum(a[i][k] * b[k][j] for k in range(len(b))) for j in range(len(b[0]))] for i in range(len(a))]


def hand_ssaw(fc, wq, wk, wv, w1, b1, w2, b2, ga, ba, gf, bf, eps):
    """Plain-Python forward pass over a 2-row combined sequence."""
    q, k, v = _mm(fc, wq), _mm(fc, wk), _mm(fc, wv)
    d = len(fc[0])
    sa = []
    for i in range(len(fc)):
        scores = [sum(q[i][c] * k[j][c] for c in range(d)) / math.sqrt(d) for j in range(len(fc))]
        top = max(scores)
        e = [math.exp(s - top) for s in scores]
        w = [x / sum(e) for x in e]
        sa.append([sum(w[j] * v[j][c] for j in range(len(fc))) for c in range(d)])
    fa = [_ln([fc[i][c] + sa[i][c] for c in range(d)], ga, ba, eps) for i in range(len(fc))]
    hidden = [[max(0.0, x + b) for x, b in zip(row, b1)] for row in _mm(fa, w1)]
    ffn = [[x + b for x, b in zip(row, b2)] for row in _mm(hidden, w2)]
    ff = [_ln([fa[i][c] + ffn[i][c] for c in range(d)], gf, bf, eps) for i in range(len(fc))]
    gate = [[1.0 / (1.0 + math.exp(-x)) for x in row] for row in ff]
    fused = [[fc[i][c] * gate[i][c] for c in range(d)] for i in range(len(fc))]
    return fused, gate


def test_matches_hand_unrolled_forward():
    block = SSAW(2, 2, np.random.default_rng(0))
    consts = {
        "wq": [[0.1, -0.2], [0.3, 0.05]],
        "wk": [[0.2, 0.1], [-0.1, 0.4]],
        "wv": [[0.5, -0.3], [0.2, 0.1]],
        "w1": [[0.3, -0.1], [0.2, 0.25]],
        "b1": [0.05, -0.02],
        "w2": [[-0.2, 0.4], [0.1, 0.3]],
        "b2": [0.01, 0.03],
        "ga": [1.1, 0.9], "ba": [0.1, -0.1],
        "gf": [0.8, 1.2], "bf": [-0.05, 0.2],
    }
    block.w_q.data = np.array(consts["wq"])
    block.w_k.data = np.array(consts["wk"])
    block.w_v.data = np.array(consts["wv"])
    block.l1.weight.data, block.l1.bias.data = np.array(consts["w1"]), np.array(consts["b1"])
    block.l2.weight.data, block.l2.bias.data = np.array(consts["w2"]), np.array(consts["b2"])
    block.ln_a.gamma.data, block.ln_a.beta.data = np.array(consts["ga"]), np.array(consts["ba"])
    block.ln_f.gamma.data, block.ln_f.beta.data = np.array(consts["gf"]), np.array(consts["bf"])
    q, v = [[0.7, -0.4]], [[-0.3, 0.9]]
    out = block.fuse(Tensor(q), Tensor(v))
    fused, gate = hand_ssaw(q + v, consts["wq"], consts["wk"], consts["wv"], consts["w1"], consts["b1"],
                            consts["w2"], consts["b2"], consts["ga"], consts["ba"], consts["gf"], consts["bf"],
                            block.ln_a.eps)
    assert np.allclose(out.fused.data, fused, atol=1e-12)
    assert np.allclose(out.gate.data, gate, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_gating_invariants(m, n, seed):
    rng = np.random.default_rng(seed)
    block = SSAW(4, 8, rng)
    q, v = rng.normal(size=(m, 4)), rng.normal(size=(n, 4))
    q[rng.random(q.shape) < 0.1] = 0.0
    out = block.fuse(Tensor(q), Tensor(v))
    fc = np.concatenate([q, v])
    g = out.gate.data
    assert out.fused.shape == (m + n, 4)
    assert np.all((g > 0) & (g < 1))
    nz = fc != 0
    assert np.all(np.abs(out.fused.data[nz]) < np.abs(fc[nz]))
    assert np.all(np.sign(out.fused.data[nz]) == np.sign(fc[nz]))
    assert np.all(out.fused.data[~nz] == 0)


def test_gate_summary_uniform():
    gate = Tensor(np.full((5, 4), 0.5))
    out = FusionOutput(fused=gate, gate=gate, boundary=3)
    summary = gate_summary(out, [True, False, True])
    assert summary == {"mean_gate_informative": 0.5, "mean_gate_distractor": 0.5, "mean_gate_video": 0.5}


def test_gate_summary_empty_group_is_nan():
    gate = Tensor(np.full((4, 2), 0.3))
    summary = gate_summary(FusionOutput(gate, gate, 2), [True, True])
    assert math.isnan(summary["mean_gate_distractor"])
    assert summary["mean_gate_informative"] == pytest.approx(0.3)


def test_gate_summary_skips_specials():
    g = np.array([[0.9], [0.1], [0.5], [0.2]])
    gate = Tensor(g)
    summary = gate_summary(FusionOutput(gate, gate, 3), [True, False, False], question_ids=[40, 90, 2])
    assert summary["mean_gate_distractor"] == pytest.approx(0.1)
    assert summary["mean_gate_video"] == pytest.approx(0.2)


def test_gate_summary_mask_length_mismatch():
    gate = Tensor(np.full((4, 2), 0.3))
    with pytest.raises(ValueError):
        gate_summary(FusionOutput(gate, gate, 2), [True])


def test_ssaw_block_gradcheck():
    rng = np.random.default_rng(4)
    block = SSAW(4, 6, rng)
    q = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    v = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = rng.normal(size=(5, 4))
    assert T.gradcheck(lambda: T.sum_(block.fuse(q, v).fused * w), [q, v] + block.parameters()) < 1e-3
