"""Sigmoid self-attention weighting of a concatenated question/video sequence.

The block attends over ``f_c = concat(question, video)`` with a single head,
applies residual + layer norm, a ReLU feed-forward with residual + layer
norm, squashes the result with a sigmoid and multiplies it into ``f_c``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, xavier
from .tensor import Tensor
from .transformer import padding_bias


@dataclass
class FusionOutput:
    fused: Tensor
    gate: Tensor
    boundary: int | np.ndarray


class SSAW(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        self.w_q = xavier(rng, d_model, d_model)
        self.w_k = xavier(rng, d_model, d_model)
        self.w_v = xavier(rng, d_model, d_model)
        self.ln_a = LayerNorm(d_model)
        self.l1 = Linear(d_model, d_ff, rng)
        self.l2 = Linear(d_ff, d_model, rng)
        self.ln_f = LayerNorm(d_model)
        self.d_model = d_model
        # test hook: when set, replaces sigmoid(f_f) with this constant/array
        self.gate_override = None

    def gate_logits(self, f_c: Tensor, valid: np.ndarray | None = None) -> Tensor:
        """f_f for a [B, L, d] combined sequence."""
        q = T.matmul(f_c, self.w_q)
        k = T.matmul(f_c, self.w_k)
        v = T.matmul(f_c, self.w_v)
        scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(self.d_model))
        if valid is not None:
            scores = scores + padding_bias(valid)[:, 0]
        f_a = self.ln_a(f_c + T.matmul(T.softmax(scores, axis=-1), v))
        return self.ln_f(f_a + self.l2(T.relu(self.l1(f_a))))

    def gate(self, f_c: Tensor, valid: np.ndarray | None = None) -> Tensor:
        if self.gate_override is not None:
            return Tensor(np.broadcast_to(np.asarray(self.gate_override, dtype=np.float64), f_c.shape))
        return T.sigmoid(self.gate_logits(f_c, valid))

    def weight(self, f_c: Tensor, valid: np.ndarray | None = None) -> FusionOutput:
        """Gate an already-concatenated batch [B, L, d]; boundary left to the caller."""
        g = self.gate(f_c, valid)
        return FusionOutput(fused=T.mul(f_c, g), gate=g, boundary=-1)

    def fuse(self, f_question: Tensor, f_video: Tensor) -> FusionOutput:
        """Fuse one question [M, d] with one video [N', d]."""
        if f_question.ndim != 2 or f_video.ndim != 2:
            raise ValueError("fuse expects unbatched [M, d] and [N', d] inputs")
        if f_question.shape[1] != f_video.shape[1] or f_question.shape[1] != self.d_model:
            raise ValueError(f"d_model mismatch: question {f_question.shape}, video {f_video.shape}, "
                             f"block {self.d_model}")
        if f_question.shape[0] < 1 or f_video.shape[0] < 1:
            raise ValueError("fuse needs at least one question row and one video row")
        f_c = T.concat([f_question, f_video], axis=0)
        batched = T.reshape(f_c, (1,) + f_c.shape)
        out = self.weight(batched)
        return FusionOutput(fused=T.reshape(out.fused, f_c.shape),
                            gate=T.reshape(out.gate, f_c.shape),
                            boundary=f_question.shape[0])


def gate_summary(out: FusionOutput, informative_mask, question_ids=None) -> dict[str, float]:
    """Channel-averaged gate means over informative question rows, distractor rows and video rows.

    Rows whose ``question_ids`` entry is a special token are left out of both
    question groups. An empty group reports NaN.
    """
    from .embeddings import NUM_SPECIALS

    gate = out.gate.data
    m = int(out.boundary)
    mask = np.asarray(informative_mask, dtype=bool)
    if mask.shape != (m,):
        raise ValueError(f"informative mask length {mask.shape[0] if mask.ndim else 0} != question length {m}")
    per_row = gate.mean(axis=-1)
    regular = np.ones(m, dtype=bool)
    if question_ids is not None:
        regular = np.asarray(question_ids) >= NUM_SPECIALS

    def group_mean(values: np.ndarray) -> float:
        return float(values.mean()) if values.size else float("nan")

    return {
        "mean_gate_informative": group_mean(per_row[:m][mask & regular]),
        "mean_gate_distractor": group_mean(per_row[:m][~mask & regular]),
        "mean_gate_video": group_mean(per_row[m:]),
    }
