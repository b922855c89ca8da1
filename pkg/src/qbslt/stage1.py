"""Stage 1: contrastive video-text alignment plus masked text reconstruction."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Sample
from .embeddings import IGNORE_ID, MASK, NUM_SPECIALS, TokenSequence
from .model import ModelConfig, SLTModel, decoder_io, pad_frames, pad_ids, prepend_cls, valid_mask
from .nn import clip_grad_norm, make_optimizer
from .tensor import Tensor
from .transformer import pool_representation

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Non-finite loss during training."""


@dataclass
class Stage1Config:
    steps: int = 300
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    clip: float = 1.0
    tau: float = 0.1
    mask_ratio: float = 0.15
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


# -- losses ---------------------------------------------------------------------------

def contrastive_logits(i_v: Tensor, i_s: Tensor, tau: float) -> Tensor:
    """Cosine-similarity logits [B, B]: rows are videos, columns texts."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    try:
        v = T.l2_normalize(i_v, axis=-1)
        s = T.l2_normalize(i_s, axis=-1)
    except ZeroDivisionError:
        raise ValueError("zero-norm pooled representation") from None
    return T.matmul(v, T.transpose(s, (1, 0))) * (1.0 / tau)


def symmetric_infonce(logits: Tensor) -> Tensor:
    """Half row-wise plus half column-wise cross-entropy with diagonal targets."""
    b = logits.shape[0]
    targets = np.arange(b)
    rows = T.cross_entropy(logits, targets)
    cols = T.cross_entropy(T.transpose(logits, (1, 0)), targets)
    return rows * 0.5 + cols * 0.5


def similarity_loss(model: SLTModel, video_pooled: Tensor, text_pooled: Tensor, tau: float) -> Tensor:
    i_v = model.proj_video(video_pooled)
    i_s = model.proj_text(text_pooled)
    return symmetric_infonce(contrastive_logits(i_v, i_s, tau))


def mask_tokens(s: TokenSequence, ratio: float, seed) -> tuple[TokenSequence, TokenSequence]:
    """Replace each non-special token by MASK with probability ``ratio``."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ids = np.asarray(s.ids, dtype=np.int64)
    draws = rng.random(ids.shape[0])
    hit = (draws < ratio) & (ids >= NUM_SPECIALS)
    masked = np.where(hit, MASK, ids)
    targets = np.where(hit, ids, IGNORE_ID)
    return TokenSequence(masked.tolist()), TokenSequence(targets.tolist())


# -- encoders ---------------------------------------------------------------------------

def encode_video_pooled(model: SLTModel, samples: Sequence[Sample]) -> Tensor:
    frames, lengths = pad_frames([s.video.frames for s in samples])
    x, out_len = model.video_features(frames, lengths)
    seq, valid, ids = prepend_cls(model, x, out_len)
    states = model.video_encoder(seq, valid)
    return pool_representation(states, ids, "CLS")


def encode_text_pooled(model: SLTModel, samples: Sequence[Sample]) -> Tensor:
    ids, lengths = pad_ids([s.translation.ids for s in samples])
    states = model.text_encoder(model.text_embed(ids), valid_mask(lengths, ids.shape[1]))
    return pool_representation(states, ids, "EOS")


def reconstruction_logits(model: SLTModel, masked: Sequence[TokenSequence],
                          originals: Sequence[TokenSequence]) -> Tensor:
    """Decoder logits for the original sequence, conditioned on the masked one."""
    ids, lengths = pad_ids([m.ids for m in masked])
    memory = model.text_encoder(model.text_embed(ids), valid_mask(lengths, ids.shape[1]))
    inputs, _, _, _ = decoder_io([[] for _ in originals], [o.ids for o in originals])
    return model.decoder(model.text_embed(inputs), memory, valid_mask(lengths, ids.shape[1]))


def reconstruction_loss(model: SLTModel, masked: Sequence[TokenSequence], targets: Sequence[TokenSequence],
                        originals: Sequence[TokenSequence] | None = None) -> Tensor:
    """Cross-entropy at masked positions only."""
    if originals is None:
        originals = [TokenSequence([t if t != IGNORE_ID else m for m, t in zip(ms.ids, ts.ids)])
                     for ms, ts in zip(masked, targets)]
    logits = reconstruction_logits(model, masked, originals)
    tgt, _ = pad_ids([t.ids for t in targets], pad=IGNORE_ID)
    return T.cross_entropy(logits, tgt[:, :logits.shape[1]], IGNORE_ID)


# -- evaluation helpers -----------------------------------------------------------------

def retrieval_accuracy(model: SLTModel, samples: Sequence[Sample], tau: float = 0.1) -> tuple[float, float]:
    """In-batch top-1 accuracy (video->text, text->video) over ``samples``."""
    was = model.training
    model.eval()
    with T.no_grad():
        logits = contrastive_logits(model.proj_video(encode_video_pooled(model, samples)),
                                    model.proj_text(encode_text_pooled(model, samples)), tau).data
    model.train(was)
    target = np.arange(len(samples))
    return float((logits.argmax(axis=1) == target).mean()), float((logits.argmax(axis=0) == target).mean())


def masked_recovery_accuracy(model: SLTModel, samples: Sequence[Sample], ratio: float, seed: int) -> float:
    """Fraction of masked tokens whose argmax reconstruction equals the original."""
    rng = np.random.default_rng(seed)
    masked, targets = zip(*(mask_tokens(s.translation, ratio, rng) for s in samples))
    was = model.training
    model.eval()
    with T.no_grad():
        logits = reconstruction_logits(model, masked, [s.translation for s in samples]).data
    model.train(was)
    tgt, _ = pad_ids([t.ids for t in targets], pad=IGNORE_ID)
    keep = tgt != IGNORE_ID
    if not keep.any():
        return float("nan")
    return float((logits.argmax(-1)[keep] == tgt[keep]).mean())


# -- training ----------------------------------------------------------------------------

def stage1_parameters(model: SLTModel):
    return model.parameters_with_prefix(("text_embed.", "video_embed.", "video_cls", "video_encoder.",
                                         "text_encoder.", "decoder.", "proj_video.", "proj_text."))


def train_stage1(dataset: Sequence[Sample], model_cfg: ModelConfig, cfg: Stage1Config,
                 log_path: str | Path | None = None, use_similarity: bool = True,
                 use_reconstruction: bool = True) -> tuple[SLTModel, list[tuple[int, float, float]]]:
    """Jointly minimise the similarity and reconstruction losses.

    Returns the trained model and the per-step (step, L_sim, L_R) log.
    """
    if not dataset:
        raise ValueError("stage 1 needs a non-empty dataset")
    model = SLTModel(model_cfg)
    model.train()
    params = stage1_parameters(model)
    opt = make_optimizer(cfg.optimizer, params, cfg.lr, cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 101])
    order = rng.permutation(len(dataset))
    cursor = 0
    history = []
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for step in range(cfg.steps):
            if cursor + cfg.batch_size > len(order):
                order = rng.permutation(len(dataset))
                cursor = 0
            batch = [dataset[i] for i in order[cursor:cursor + cfg.batch_size]]
            cursor += cfg.batch_size
            for p in params:
                p.zero_grad()
            loss = Tensor(0.0)
            l_sim = l_r = 0.0
            if use_similarity and len(batch) > 1:
                sim = similarity_loss(model, encode_video_pooled(model, batch),
                                      encode_text_pooled(model, batch), cfg.tau)
                loss = loss + sim
                l_sim = sim.item()
            if use_reconstruction:
                masked, targets = zip(*(mask_tokens(s.translation, cfg.mask_ratio, rng) for s in batch))
                rec = reconstruction_loss(model, masked, targets, [s.translation for s in batch])
                loss = loss + rec
                l_r = rec.item()
            if not (math.isfinite(l_sim) and math.isfinite(l_r)):
                raise NumericError(f"non-finite stage-1 loss at step {step}: L_sim={l_sim} L_R={l_r}")
            if loss.requires_grad:
                loss.backward()
                clip_grad_norm(params, cfg.clip)
                opt.step()
            history.append((step, l_sim, l_r))
            if fh:
                fh.write(f"{step} {l_sim:.10f} {l_r:.10f}\n")
    finally:
        if fh:
            fh.close()
    model.eval()
    return model, history
