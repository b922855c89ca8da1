"""Token and video embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Linear, Module, param
from .tensor import Tensor

PAD, BOS, EOS, MASK, CLS = 0, 1, 2, 3, 4
SPECIAL_IDS = (PAD, BOS, EOS, MASK, CLS)
SPECIAL_NAMES = ("<pad>", "<bos>", "<eos>", "<mask>", "<cls>")
NUM_SPECIALS = len(SPECIAL_IDS)
IGNORE_ID = -100


@dataclass
class TokenSequence:
    ids: list[int]

    def __post_init__(self):
        self.ids = [int(i) for i in self.ids]

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def validate(self, vocab_size: int) -> None:
        for i in self.ids:
            if not 0 <= i < vocab_size:
                raise ValueError(f"token id {i} outside vocabulary of size {vocab_size}")


@dataclass
class VideoFeatureSequence:
    frames: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"video frames must be a non-empty [N, frame_dim] matrix, got {self.frames.shape}")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_dim(self) -> int:
        return self.frames.shape[1]


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def pooled_length(n: int) -> int:
    return (n // 2) // 2


class TextEmbedding(Module):
    """Trainable token table plus fixed sinusoidal positions."""

    def __init__(self, vocab_size: int, d_model: int, rng: np.random.Generator):
        self.table = param(rng.normal(0.0, 1.0, size=(vocab_size, d_model)))
        self.vocab_size = vocab_size
        self.d_model = d_model

    def __call__(self, ids, positions=None) -> Tensor:
        """Rows ``table[ids] + position``; ``positions`` defaults to 0, 1, 2, ... along the last axis."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ValueError(f"token id outside vocabulary of size {self.vocab_size}")
        if positions is None:
            pos = sinusoidal_positions(ids.shape[-1], self.d_model)
        else:
            positions = np.asarray(positions, dtype=np.int64)
            if positions.shape != ids.shape:
                raise ValueError(f"positions shape {positions.shape} != ids shape {ids.shape}")
            pos = sinusoidal_positions(int(positions.max()) + 1 if positions.size else 0, self.d_model)[positions]
        return T.select_index(self.table, ids) + pos


def text_embed(embedding: TextEmbedding, tokens: TokenSequence) -> Tensor:
    """[M, d_model] embedding of one token sequence."""
    return embedding(np.asarray(tokens.ids, dtype=np.int64))


class BatchNorm(Module):
    """Batch norm over (batch, time) restricted to valid frames."""

    def __init__(self, d: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", np.zeros(d))
        self.register_buffer("running_var", np.ones(d))

    def __call__(self, x: Tensor, valid: np.ndarray) -> Tensor:
        # valid: [B, T] booleans
        if self.training:
            m = valid[..., None].astype(np.float64)
            count = float(m.sum())
            mu = T.sum_(x * m, axis=(0, 1)) * (1.0 / count)
            xc = x - mu
            var = T.sum_(xc * xc * m, axis=(0, 1)) * (1.0 / count)
            xhat = xc * T.power(var + self.eps, -0.5)
            mom = self.momentum
            self._buffers["running_mean"] = (1 - mom) * self._buffers["running_mean"] + mom * mu.data
            self._buffers["running_var"] = (1 - mom) * self._buffers["running_var"] + mom * var.data
        else:
            xhat = (x - self._buffers["running_mean"]) * (1.0 / np.sqrt(self._buffers["running_var"] + self.eps))
        return xhat * self.gamma + self.beta


def _edge_fill_index(batch: int, length: int, lengths: np.ndarray) -> np.ndarray:
    # flat row index that repeats each sequence's last valid frame over its padding
    t = np.minimum(np.arange(length)[None, :], lengths[:, None] - 1)
    return (np.arange(batch)[:, None] * length + t).astype(np.int64)


class VideoEmbedding(Module):
    """Per-frame projection, then two Conv1D -> BN -> ReLU -> MaxPool(2) blocks."""

    def __init__(self, frame_dim: int, d_model: int, rng: np.random.Generator, kernel: int = 5):
        self.proj = Linear(frame_dim, d_model, rng)
        bound = np.sqrt(6.0 / (kernel * d_model + d_model))
        self.conv1_w = param(rng.uniform(-bound, bound, size=(kernel, d_model, d_model)))
        self.conv1_b = param(np.zeros(d_model))
        self.bn1 = BatchNorm(d_model)
        self.conv2_w = param(rng.uniform(-bound, bound, size=(kernel, d_model, d_model)))
        self.conv2_b = param(np.zeros(d_model))
        self.bn2 = BatchNorm(d_model)
        self.frame_dim = frame_dim
        self.d_model = d_model

    def _block(self, x: Tensor, lengths: np.ndarray, w: Tensor, b: Tensor, bn: BatchNorm):
        batch, length, d = x.shape
        idx = _edge_fill_index(batch, length, lengths)
        x = T.select_index(T.reshape(x, (batch * length, d)), idx)
        x = T.conv1d(x, w, b, padding="edge")
        valid = np.arange(length)[None, :] < lengths[:, None]
        x = T.relu(bn(x, valid))
        return T.max_pool1d(x, 2), lengths // 2

    def __call__(self, frames: np.ndarray, lengths: np.ndarray | None = None):
        """frames [B, N, F] (zero padded) -> ([B, N'max, d_model], per-sample N')."""
        frames = np.asarray(frames, dtype=np.float64)
        batch, n, fdim = frames.shape
        if fdim != self.frame_dim:
            raise ValueError(f"frame_dim {fdim} != expected {self.frame_dim}")
        lengths = np.full(batch, n) if lengths is None else np.asarray(lengths, dtype=np.int64)
        if lengths.min() < 4:
            raise ValueError(f"video needs at least 4 frames, got {int(lengths.min())}")
        x = self.proj(Tensor(frames))
        x, lengths = self._block(x, lengths, self.conv1_w, self.conv1_b, self.bn1)
        x, lengths = self._block(x, lengths, self.conv2_w, self.conv2_b, self.bn2)
        return x, lengths


def video_embed(embedding: VideoEmbedding, video: VideoFeatureSequence) -> Tensor:
    """[N', d_model] embedding of one video; N' = floor(floor(N / 2) / 2)."""
    if len(video) < 4:
        raise ValueError(f"video needs at least 4 frames, got {len(video)}")
    out, _ = embedding(video.frames[None, :, :])
    return T.reshape(out, out.shape[1:])
