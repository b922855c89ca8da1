"""Stage 2: question-based translation with gated fusion and dual decoding losses.

The decoder reads ``[BOS] + question + translation`` in one teacher-forced
pass. Positions that predict question tokens give the question loss, the
remaining positions give the translation loss, and the training objective is
their sum.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Sample
from .embeddings import BOS, EOS, IGNORE_ID
from .metrics import ScoreReport, score
from .model import (FUSION_MODES, REUSED_PREFIXES, ModelConfig, SLTModel, decoder_io, pack_rows, pad_frames, pad_ids,
                    phase_positions)
from .nn import CheckpointError, clip_grad_norm, make_optimizer, state_digests
from .ssaw import FusionOutput
from .stage1 import NumericError
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class Stage2Config:
    epochs: int = 40
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 3e-3
    momentum: float = 0.9
    clip: float = 1.0
    fusion: str = "ssaw"
    max_len: int = 12
    eval_every: int = 1
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncodedBatch:
    memory: Tensor
    valid: np.ndarray
    fused: Tensor
    gate: Tensor | None
    question_lengths: np.ndarray
    video_lengths: np.ndarray


def uses_question(mode: str) -> bool:
    return mode != "video-only"


def uses_video(mode: str) -> bool:
    return mode != "question-only"


def uses_gate(mode: str) -> bool:
    return mode != "concat"


def _check_mode(mode: str) -> None:
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}; expected one of {', '.join(FUSION_MODES)}")


def encode_fused(model: SLTModel, samples: Sequence[Sample], mode: str = "ssaw") -> EncodedBatch:
    """Encoder states h_j over the (optionally gated) question/video sequence."""
    _check_mode(mode)
    parts = []
    b = len(samples)
    q_len = np.zeros(b, dtype=np.int64)
    v_len = np.zeros(b, dtype=np.int64)
    if uses_question(mode):
        ids, q_len = pad_ids([s.question.ids for s in samples])
        parts.append((model.text_embed(ids), q_len))
    if uses_video(mode):
        frames, lengths = pad_frames([s.video.frames for s in samples])
        x, v_len = model.video_features(frames, lengths)
        parts.append((x, v_len))
    f_c, valid, _ = pack_rows(parts)
    gate = None
    if uses_gate(mode):
        out = model.ssaw.weight(f_c, valid)
        f_c, gate = out.fused, out.gate
    memory = model.video_encoder(f_c, valid)
    return EncodedBatch(memory, valid, f_c, gate, q_len, v_len)


def prefixes_for(samples: Sequence[Sample], mode: str) -> list[list[int]]:
    return [list(s.question.ids) if uses_question(mode) else [] for s in samples]


def dual_teacher_forced_loss(model: SLTModel, samples: Sequence[Sample], mode: str = "ssaw"
                             ) -> tuple[Tensor, Tensor, Tensor]:
    """(L_D, L_S, L_total) for a batch; each loss is a mean over its tokens."""
    for s in samples:
        if not s.translation.ids or (uses_question(mode) and not s.question.ids):
            raise ValueError(f"sample {s.id}: empty question or translation")
    enc = encode_fused(model, samples, mode)
    prefixes = prefixes_for(samples, mode)
    inputs, tgt_d, tgt_s, _ = decoder_io(prefixes, [s.translation.ids for s in samples])
    positions = phase_positions([len(p) for p in prefixes], inputs.shape[1])
    logits = model.decoder(model.text_embed(inputs, positions), enc.memory, enc.valid)
    l_d = T.cross_entropy(logits, tgt_d, IGNORE_ID)
    l_s = T.cross_entropy(logits, tgt_s, IGNORE_ID)
    return l_d, l_s, l_d + l_s


def generate(model: SLTModel, samples: Sequence[Sample], mode: str = "ssaw", max_len: int = 12) -> list[list[int]]:
    """Greedy translations (EOS stripped), with the question teacher-forced as a prefix.

    Only the question and video of each sample are read.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    was = model.training
    model.eval()
    with T.no_grad():
        enc = encode_fused(model, samples, mode)
        prefixes = prefixes_for(samples, mode)
        seqs = [[BOS] + p for p in prefixes]
        start = [len(s) for s in seqs]
        done = [False] * len(samples)
        for _ in range(max_len):
            ids, lengths = pad_ids(seqs)
            positions = phase_positions([len(p) for p in prefixes], ids.shape[1])
            logits = model.decoder(model.text_embed(ids, positions), enc.memory, enc.valid).data
            for i, seq in enumerate(seqs):
                if done[i]:
                    continue
                nxt = int(logits[i, lengths[i] - 1].argmax())
                seq.append(nxt)
                if nxt == EOS:
                    done[i] = True
            if all(done):
                break
    model.train(was)
    out = []
    for seq, s0 in zip(seqs, start):
        body = seq[s0:]
        out.append(body[:body.index(EOS)] if EOS in body else body)
    return out


def references(samples: Sequence[Sample]) -> list[list[int]]:
    return [[t for t in s.translation.ids if t != EOS] for s in samples]


def evaluate_model(model: SLTModel, samples: Sequence[Sample], mode: str, max_len: int = 12,
                   batch_size: int = 64) -> tuple[ScoreReport, list[list[int]]]:
    hyps: list[list[int]] = []
    for i in range(0, len(samples), batch_size):
        hyps += generate(model, samples[i:i + batch_size], mode, max_len)
    return score(hyps, references(samples)), hyps


def stage2_prefixes(mode: str) -> tuple[str, ...]:
    prefixes = REUSED_PREFIXES
    return prefixes + ("ssaw.",) if uses_gate(mode) else prefixes


@dataclass
class Stage2Result:
    model: SLTModel
    history: list[tuple[int, float, float, float]]
    dev_bleu: list[tuple[int, float]] = field(default_factory=list)
    best_epoch: int = -1
    reused: list[str] = field(default_factory=list)
    reuse_digests_match: bool = True


def init_stage2_model(model_cfg: ModelConfig, stage1_state: dict | None) -> tuple[SLTModel, list[str], bool]:
    """Fresh model with the reused modules overwritten from ``stage1_state``."""
    model = SLTModel(model_cfg)
    if stage1_state is None:
        return model, [], True
    loaded = model.load_state_dict(stage1_state, strict=True, prefixes=REUSED_PREFIXES)
    if not loaded:
        raise CheckpointError("stage-1 checkpoint shares no parameter names with the model")
    current = model.state_dict()
    want = state_digests({n: stage1_state[n] for n in loaded})
    got = state_digests({n: current[n] for n in loaded})
    return model, loaded, want == got


def train_stage2(dataset: Sequence[Sample], stage1_state: dict | None, model_cfg: ModelConfig,
                 cfg: Stage2Config, dev: Sequence[Sample] | None = None,
                 log_path: str | Path | None = None) -> Stage2Result:
    """Minimise L_total; keep the parameters with the best dev BLEU-4 (last epoch without dev)."""
    if not dataset:
        raise ValueError("stage 2 needs a non-empty dataset")
    _check_mode(cfg.fusion)
    model, reused, match = init_stage2_model(model_cfg, stage1_state)
    model.train()
    params = model.parameters_with_prefix(stage2_prefixes(cfg.fusion))
    opt = make_optimizer(cfg.optimizer, params, cfg.lr, cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 202])
    result = Stage2Result(model=model, history=[], reused=reused, reuse_digests_match=match)
    best_key, best_state = None, None
    step = 0
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(dataset))
            for start in range(0, len(order), cfg.batch_size):
                batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
                for p in params:
                    p.zero_grad()
                l_d, l_s, total = dual_teacher_forced_loss(model, batch, cfg.fusion)
                values = (l_d.item(), l_s.item(), total.item())
                if not all(math.isfinite(v) for v in values):
                    raise NumericError(f"non-finite stage-2 loss at step {step}: {values}")
                total.backward()
                clip_grad_norm(params, cfg.clip)
                opt.step()
                result.history.append((step, *values))
                if fh:
                    fh.write(f"{step} {values[0]:.10f} {values[1]:.10f} {values[2]:.10f}\n")
                step += 1
            last = epoch == cfg.epochs - 1
            if dev and ((epoch + 1) % cfg.eval_every == 0 or last):
                report, _ = evaluate_model(model, dev, cfg.fusion, cfg.max_len)
                result.dev_bleu.append((epoch, report.B4))
                log.info("epoch %d dev B4 %.4f ROUGE %.4f", epoch, report.B4, report.ROUGE)
                # ROUGE breaks ties (e.g. all-zero BLEU-4 early on); later epochs win exact ties
                key = (report.B4, report.ROUGE)
                if best_key is None or key >= best_key:
                    best_key, best_state, result.best_epoch = key, model.state_dict(), epoch
    finally:
        if fh:
            fh.close()
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        result.best_epoch = cfg.epochs - 1
    model.eval()
    return result


def fusion_for_sample(model: SLTModel, sample: Sample, mode: str = "ssaw") -> FusionOutput:
    """Gate map of one sample (rows: question tokens then video steps)."""
    with T.no_grad():
        was = model.training
        model.eval()
        enc = encode_fused(model, [sample], mode)
        model.train(was)
    if enc.gate is None:
        raise ValueError(f"fusion mode {mode!r} has no gate")
    n = int(enc.valid[0].sum())
    return FusionOutput(fused=Tensor(enc.fused.data[0, :n]), gate=Tensor(enc.gate.data[0, :n]),
                        boundary=int(enc.question_lengths[0]))
