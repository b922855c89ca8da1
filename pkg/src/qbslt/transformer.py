"""Post-norm transformer encoder and decoder stacks."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .embeddings import CLS, EOS
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor

NEG_INF = -1e9


def padding_bias(valid: np.ndarray) -> np.ndarray:
    """Additive key mask [B, 1, 1, L] from a [B, L] validity array."""
    valid = np.asarray(valid, dtype=bool)
    return np.where(valid, 0.0, NEG_INF)[:, None, None, :]


def causal_bias(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), NEG_INF), k=1)


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)
        self.n_heads = n_heads
        self.d_model = d_model
        self._last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, length, _ = x.shape
        dh = self.d_model // self.n_heads
        return T.transpose(T.reshape(x, (b, length, self.n_heads, dh)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, keys: Tensor, bias: np.ndarray | None = None) -> Tensor:
        b, tq, d = query.shape
        q = self._split(self.wq(query))
        k = self._split(self.wk(keys))
        v = self._split(self.wv(keys))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(d // self.n_heads))
        if bias is not None:
            scores = scores + bias
        weights = T.softmax(scores, axis=-1)
        self._last_weights = weights.data
        ctx = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (b, tq, d))
        return self.wo(ctx)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        self.l1 = Linear(d_model, d_ff, rng)
        self.l2 = Linear(d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.l2(T.relu(self.l1(x)))


class EncoderLayer(Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator):
        self.attn = MultiHeadAttention(d_model, n_heads, rng)
        self.ln1 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ff, rng)
        self.ln2 = LayerNorm(d_model)

    def __call__(self, x: Tensor, bias: np.ndarray | None) -> Tensor:
        x = self.ln1(x + self.attn(x, x, bias))
        return self.ln2(x + self.ffn(x))


class DecoderLayer(Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator):
        self.self_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.ln1 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.ln2 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ff, rng)
        self.ln3 = LayerNorm(d_model)

    def __call__(self, x: Tensor, memory: Tensor, self_bias: np.ndarray, memory_bias: np.ndarray | None) -> Tensor:
        x = self.ln1(x + self.self_attn(x, x, self_bias))
        x = self.ln2(x + self.cross_attn(x, memory, memory_bias))
        return self.ln3(x + self.ffn(x))


def _batched(x: Tensor, valid):
    """Promote an unbatched [L, d] input (and [L] mask) to batch size 1."""
    if x.ndim == 2:
        x = T.reshape(x, (1,) + x.shape)
        if valid is not None:
            valid = np.asarray(valid, dtype=bool)[None, :]
        return x, valid, True
    return x, valid, False


class Encoder(Module):
    def __init__(self, n_layers: int, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator):
        self.layers = [EncoderLayer(d_model, n_heads, d_ff, rng) for _ in range(n_layers)]
        self.d_model = d_model

    def __call__(self, x: Tensor, valid: np.ndarray | None = None) -> Tensor:
        """Encode [B, L, d] (or [L, d]); ``valid`` marks non-padded positions."""
        x, valid, squeeze = _batched(x, valid)
        b, length, _ = x.shape
        if valid is None:
            bias = None
        else:
            valid = np.asarray(valid, dtype=bool)
            if valid.shape != (b, length):
                raise ValueError(f"pad mask shape {valid.shape} does not match input length {(b, length)}")
            if not valid.any(axis=1).all():
                raise ValueError("encoder input is fully padded")
            bias = padding_bias(valid)
        for layer in self.layers:
            x = layer(x, bias)
        return T.reshape(x, x.shape[1:]) if squeeze else x


class Decoder(Module):
    """Causal decoder with cross-attention and a vocabulary projection (W, b)."""

    def __init__(self, n_layers: int, d_model: int, n_heads: int, d_ff: int, vocab_size: int,
                 rng: np.random.Generator):
        self.layers = [DecoderLayer(d_model, n_heads, d_ff, rng) for _ in range(n_layers)]
        self.out = Linear(d_model, vocab_size, rng)
        self.d_model = d_model
        self.vocab_size = vocab_size

    def __call__(self, targets_in: Tensor, memory: Tensor, memory_valid: np.ndarray | None = None) -> Tensor:
        """Logits [B, T, vocab] (or [T, vocab]) for embedded decoder inputs."""
        targets_in, _, squeeze = _batched(targets_in, None)
        if memory.ndim == 2:
            memory = T.reshape(memory, (1,) + memory.shape)
            if memory_valid is not None:
                memory_valid = np.asarray(memory_valid, dtype=bool)[None, :]
        if memory.shape[1] == 0:
            raise ValueError("decoder memory is empty")
        if memory.shape[0] != targets_in.shape[0]:
            raise ValueError(f"batch mismatch: targets {targets_in.shape[0]} vs memory {memory.shape[0]}")
        memory_bias = None
        if memory_valid is not None:
            memory_valid = np.asarray(memory_valid, dtype=bool)
            if memory_valid.shape != memory.shape[:2]:
                raise ValueError(f"memory mask shape {memory_valid.shape} != {memory.shape[:2]}")
            if not memory_valid.any(axis=1).all():
                raise ValueError("decoder memory is fully padded")
            memory_bias = padding_bias(memory_valid)
        self_bias = causal_bias(targets_in.shape[1])
        x = targets_in
        for layer in self.layers:
            x = layer(x, memory, self_bias, memory_bias)
        logits = self.out(x)
        return T.reshape(logits, logits.shape[1:]) if squeeze else logits


def pool_representation(states: Tensor, token_ids, kind: str) -> Tensor:
    """State at the CLS position (video path) or the last EOS position (text path).

    ``states`` is [L, d] with ``token_ids`` of length L, or [B, L, d] with a
    [B, L] id array; the result is [d] or [B, d].
    """
    ids = np.asarray(token_ids)
    target = {"CLS": CLS, "EOS": EOS}.get(kind.upper())
    if target is None:
        raise ValueError(f"unknown pooling kind {kind!r}")
    squeeze = states.ndim == 2
    if squeeze:
        ids = ids[None, :]
    hits = ids == target
    if not hits.any(axis=1).all():
        raise ValueError(f"{kind.upper()} token absent from sequence")
    if target == CLS:
        pos = hits.argmax(axis=1)
    else:
        pos = ids.shape[1] - 1 - hits[:, ::-1].argmax(axis=1)
    b, length = ids.shape
    flat = T.reshape(states, (b * length, states.shape[-1])) if not squeeze else states
    rows = pos + (np.arange(b) * length if not squeeze else 0)
    out = T.select_index(flat, rows)
    return T.reshape(out, (states.shape[-1],)) if squeeze else out
