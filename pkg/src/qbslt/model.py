"""Parameter store shared by both training stages, plus batch collation."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .embeddings import BOS, CLS, PAD, TextEmbedding, VideoEmbedding, sinusoidal_positions
from .nn import Linear, Module, param
from .ssaw import SSAW
from .tensor import Tensor
from .transformer import Decoder, Encoder

FUSION_MODES = ("ssaw", "concat", "question-only", "video-only")

# modules whose stage-1 weights initialise stage 2
REUSED_PREFIXES = ("text_embed.", "video_embed.", "video_encoder.", "decoder.")


@dataclass
class ModelConfig:
    vocab_size: int
    frame_dim: int
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class SLTModel(Module):
    """All trainable pieces; stage 1 and stage 2 use overlapping subsets."""

    def __init__(self, cfg: ModelConfig):
        rng = np.random.default_rng([cfg.seed, 31337])
        d = cfg.d_model
        self.text_embed = TextEmbedding(cfg.vocab_size, d, rng)
        self.video_embed = VideoEmbedding(cfg.frame_dim, d, rng)
        self.video_cls = param(rng.normal(0.0, 1.0, size=d))
        self.video_encoder = Encoder(cfg.enc_layers, d, cfg.n_heads, cfg.d_ff, rng)
        self.text_encoder = Encoder(cfg.enc_layers, d, cfg.n_heads, cfg.d_ff, rng)
        self.decoder = Decoder(cfg.dec_layers, d, cfg.n_heads, cfg.d_ff, cfg.vocab_size, rng)
        self.proj_video = Linear(d, d, rng)
        self.proj_text = Linear(d, d, rng)
        self.ssaw = SSAW(d, cfg.d_ff, rng)
        self.cfg = cfg

    def video_features(self, frames: np.ndarray, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Video embedding with sinusoidal positions added: [B, N', d], lengths N'."""
        x, out_len = self.video_embed(frames, lengths)
        return x + sinusoidal_positions(x.shape[1], self.cfg.d_model), out_len

    def parameters_with_prefix(self, prefixes: tuple[str, ...]) -> list[Tensor]:
        return [p for n, p in self.named_parameters() if n.startswith(prefixes)]


# -- collation ----------------------------------------------------------------------

def pad_ids(seqs, pad: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lengths.max())), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lengths


def pad_frames(videos) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([v.shape[0] for v in videos], dtype=np.int64)
    out = np.zeros((len(videos), int(lengths.max()), videos[0].shape[1]))
    for i, v in enumerate(videos):
        out[i, :v.shape[0]] = v
    return out, lengths


def valid_mask(lengths: np.ndarray, width: int) -> np.ndarray:
    return np.arange(width)[None, :] < np.asarray(lengths)[:, None]


def prepend_cls(model: SLTModel, x: Tensor, lengths: np.ndarray) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """[CLS; x] per sample; returns states, validity and token ids marking CLS."""
    b, _, d = x.shape
    cls = T.add(Tensor(np.zeros((b, 1, d))), model.video_cls)
    seq = T.concat([cls, x], axis=1)
    valid = valid_mask(lengths + 1, seq.shape[1])
    ids = np.full(valid.shape, PAD)
    ids[:, 0] = CLS
    return seq, valid, ids


def pack_rows(parts: list[tuple[Tensor, np.ndarray]]) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Concatenate per-sample valid rows of several [B, L_k, d] tensors along time.

    Returns the packed [B, L, d] tensor (zero rows as padding), its validity
    mask and the per-sample length of the first part (the boundary).
    """
    b, _, d = parts[0][0].shape
    flats, offsets, offset = [], [], 0
    for x, _ in parts:
        flats.append(T.reshape(x, (b * x.shape[1], d)))
        offsets.append(offset)
        offset += b * x.shape[1]
    zero_row = offset
    flats.append(Tensor(np.zeros((1, d))))
    total = sum(np.asarray(lengths) for _, lengths in parts)
    width = int(total.max())
    index = np.full((b, width), zero_row, dtype=np.int64)
    for i in range(b):
        pos = 0
        for (x, lengths), base in zip(parts, offsets):
            n = int(lengths[i])
            index[i, pos:pos + n] = base + i * x.shape[1] + np.arange(n)
            pos += n
    packed = T.select_index(T.concat(flats, axis=0), index)
    return packed, valid_mask(total, width), np.asarray(parts[0][1])


def phase_positions(prefix_lengths, width: int) -> np.ndarray:
    """Decoder input positions that restart when the translation phase begins.

    Input j of ``[BOS] + prefix + translation`` predicts prefix token j + 1
    while j < len(prefix) and translation token j - len(prefix) + 1 after, so
    slot k of either phase is queried from position k, the same position at
    which the k-th question token sits in the encoder.
    """
    plen = np.asarray(prefix_lengths, dtype=np.int64)[:, None]
    j = np.arange(width)[None, :]
    return np.where(j < plen, j, j - plen)


def decoder_io(prefixes, translations) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forcing arrays for ``[BOS] + prefix + translation``.

    Returns (inputs, prefix targets, translation targets, lengths); target
    arrays use IGNORE_ID outside their phase.
    """
    from .embeddings import IGNORE_ID

    rows = [[BOS] + list(p) + list(t) for p, t in zip(prefixes, translations)]
    full, lengths = pad_ids(rows)
    inputs = full[:, :-1]
    targets = full[:, 1:]
    width = targets.shape[1]
    pos = np.arange(width)[None, :]
    plen = np.array([len(p) for p in prefixes])[:, None]
    tlen = (lengths - 1)[:, None]
    in_prefix = pos < plen
    in_trans = (pos >= plen) & (pos < tlen)
    tgt_d = np.where(in_prefix, targets, IGNORE_ID)
    tgt_s = np.where(in_trans, targets, IGNORE_ID)
    return inputs, tgt_d, tgt_s, lengths - 1
