"""Synthetic question-based sign translation corpora.

Vocabulary layout (ids):
    0..4                      specials (pad, bos, eos, mask, cls)
    5 .. 5+C-1                content words (the translation vocabulary)
    5+C .. 5+2C-1             question words, one tied to each content word
    5+2C .. 5+2C+D-1          distractor question words

A sample's video holds, for each content word, a run of noisy copies of
that word's prototype frame. Its question has one slot per content word:
with probability ``rho`` the slot carries the tied question word, otherwise
a random distractor.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .embeddings import EOS, NUM_SPECIALS, SPECIAL_NAMES, TokenSequence, VideoFeatureSequence

FORMAT_NAME = "qbslt-corpus"
FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)
SPLITS = ("train", "dev", "test")


class DataError(Exception):
    """Malformed corpus file or inconsistent sample."""


@dataclass
class Sample:
    id: str
    video: VideoFeatureSequence
    question: TokenSequence
    translation: TokenSequence
    informative_mask: list[bool]

    def __post_init__(self):
        if len(self.informative_mask) != len(self.question):
            raise DataError(f"sample {self.id}: informative_mask length {len(self.informative_mask)} "
                            f"!= question length {len(self.question)}")
        if not self.translation.ids or self.translation.ids[-1] != EOS or self.translation.ids.count(EOS) != 1:
            raise DataError(f"sample {self.id}: translation must end with exactly one EOS")


@dataclass
class GeneratorConfig:
    content_vocab: int = 50
    distractor_vocab: int = 50
    frame_dim: int = 16
    frames_per_gesture: tuple[int, int] = (2, 5)
    frame_noise: float = 0.5
    rho: float = 0.8
    n_train: int = 500
    n_dev: int = 100
    n_test: int = 100
    min_len: int = 3
    max_len: int = 8
    n_classes: int = 5
    n_templates: int = 12
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        for name in ("content_vocab", "distractor_vocab", "frame_dim", "n_train", "n_dev", "n_test",
                     "n_classes", "n_templates"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        lo, hi = self.frames_per_gesture
        if not 1 <= lo <= hi:
            raise ValueError("frames_per_gesture must satisfy 1 <= low <= high")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("sentence lengths must satisfy 1 <= min_len <= max_len")
        if self.min_len * lo < 4:
            raise ValueError("shortest possible video has fewer than 4 frames")
        if self.frame_noise < 0:
            raise ValueError("frame_noise must be non-negative")

    @property
    def vocab_size(self) -> int:
        return NUM_SPECIALS + 2 * self.content_vocab + self.distractor_vocab

    def content_id(self, j: int) -> int:
        return NUM_SPECIALS + j

    def question_id(self, j: int) -> int:
        return NUM_SPECIALS + self.content_vocab + j

    def distractor_id(self, j: int) -> int:
        return NUM_SPECIALS + 2 * self.content_vocab + j


@dataclass
class World:
    """Seed-level fixtures shared by every sample: prototypes and templates."""

    prototypes: np.ndarray
    classes: list[np.ndarray]
    templates: list[list[int]]
    tie: np.ndarray = field(repr=False)


def build_world(cfg: GeneratorConfig) -> World:
    rng = np.random.default_rng([cfg.seed, 7919])
    prototypes = rng.normal(0.0, 1.0, size=(cfg.content_vocab, cfg.frame_dim))
    order = rng.permutation(cfg.content_vocab)
    n_classes = min(cfg.n_classes, cfg.content_vocab)
    classes = [np.sort(c) for c in np.array_split(order, n_classes)]
    templates = []
    for _ in range(cfg.n_templates):
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        templates.append([int(c) for c in rng.integers(0, n_classes, size=length)])
    tie = rng.permutation(cfg.content_vocab)
    return World(prototypes=prototypes, classes=classes, templates=templates, tie=tie)


def _draw_content(world: World, rng: np.random.Generator) -> list[int]:
    template = world.templates[int(rng.integers(len(world.templates)))]
    words: list[int] = []
    for cls in template:
        pool = world.classes[cls]
        if words and pool.size > 1:
            pool = pool[pool != words[-1]]
        elif words and pool.size == 1 and pool[0] == words[-1]:
            # single-word class repeating: borrow any other content word
            pool = np.array([j for j in range(len(world.prototypes)) if j != words[-1]])
        words.append(int(pool[int(rng.integers(pool.size))]))
    return words


def make_sample(cfg: GeneratorConfig, world: World, split: str, index: int) -> Sample:
    rng = np.random.default_rng([cfg.seed, SPLITS.index(split) + 1, index])
    words = _draw_content(world, rng)
    lo, hi = cfg.frames_per_gesture
    frames = []
    for w in words:
        k = int(rng.integers(lo, hi + 1))
        noise = rng.normal(0.0, 1.0, size=(k, cfg.frame_dim)) * cfg.frame_noise
        frames.append(world.prototypes[w] + noise)
    video = np.concatenate(frames, axis=0).astype(np.float32)
    question, informative = [], []
    for w in words:
        if rng.random() < cfg.rho:
            question.append(cfg.question_id(int(world.tie[w])))
            informative.append(True)
        else:
            question.append(cfg.distractor_id(int(rng.integers(cfg.distractor_vocab))))
            informative.append(False)
    question.append(EOS)
    informative.append(False)
    return Sample(
        id=f"{split}-{index:05d}",
        video=VideoFeatureSequence(video),
        question=TokenSequence(question),
        translation=TokenSequence([cfg.content_id(w) for w in words] + [EOS]),
        informative_mask=informative,
    )


def generate(cfg: GeneratorConfig) -> dict[str, list[Sample]]:
    """All three splits, deterministic in ``cfg.seed``."""
    cfg.validate()
    world = build_world(cfg)
    counts = {"train": cfg.n_train, "dev": cfg.n_dev, "test": cfg.n_test}
    return {split: [make_sample(cfg, world, split, i) for i in range(counts[split])] for split in SPLITS}


def vocabulary(cfg: GeneratorConfig) -> list[str]:
    words = list(SPECIAL_NAMES)
    words += [f"w{j}" for j in range(cfg.content_vocab)]
    words += [f"q{j}" for j in range(cfg.content_vocab)]
    words += [f"x{j}" for j in range(cfg.distractor_vocab)]
    return words


# -- serialisation ------------------------------------------------------------------

def _encode_frames(frames: np.ndarray) -> str:
    arr = np.ascontiguousarray(frames, dtype="<f4")
    return f"{arr.shape[0]}x{arr.shape[1]}:{arr.tobytes().hex()}"


def _decode_frames(text: str) -> np.ndarray:
    dims, _, payload = text.partition(":")
    n, _, f = dims.partition("x")
    n, f = int(n), int(f)
    raw = bytes.fromhex(payload)
    if len(raw) != 4 * n * f:
        raise ValueError(f"expected {n * f} float32 values, found {len(raw) // 4}")
    return np.frombuffer(raw, dtype="<f4").reshape(n, f).copy()


def format_sample(s: Sample) -> str:
    return "\t".join([
        s.id,
        _encode_frames(s.video.frames),
        " ".join(map(str, s.question.ids)),
        " ".join(map(str, s.translation.ids)),
        "".join("1" if b else "0" for b in s.informative_mask),
    ])


def write_samples(path: str | Path, samples: Iterable[Sample], vocab_size: int, frame_dim: int) -> None:
    lines = [f"#{FORMAT_NAME} v{FORMAT_VERSION} vocab_size={vocab_size} frame_dim={frame_dim}"]
    lines += [format_sample(s) for s in samples]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line: str) -> dict[str, int]:
    parts = line.lstrip("#").split()
    if not parts or parts[0] != FORMAT_NAME or len(parts) < 2 or not parts[1].startswith("v"):
        raise DataError(f"not a {FORMAT_NAME} file (header {line!r})")
    version = int(parts[1][1:])
    if version not in SUPPORTED_VERSIONS:
        raise DataError(f"unsupported corpus format version {version}; supported versions: "
                        f"{', '.join(map(str, SUPPORTED_VERSIONS))}")
    meta = {"version": version}
    for kv in parts[2:]:
        key, _, val = kv.partition("=")
        meta[key] = int(val)
    return meta


FIELDS = ("id", "video", "question", "translation", "informative_mask")


def parse_record(line: str, index: int, meta: dict[str, int]) -> Sample:
    cols = line.rstrip("\n").split("\t")
    if len(cols) != len(FIELDS):
        # a short record was cut inside its last present field
        where = FIELDS[len(cols) - 1] if len(cols) < len(FIELDS) else FIELDS[-1]
        raise DataError(f"record {index}: field {where!r}: truncated or malformed record, "
                        f"expected {len(FIELDS)} fields, got {len(cols)}")
    name = "id"
    try:
        sid = cols[0]
        if not sid:
            raise ValueError("empty id")
        name = "video"
        frames = _decode_frames(cols[1])
        if "frame_dim" in meta and frames.shape[1] != meta["frame_dim"]:
            raise ValueError(f"frame_dim {frames.shape[1]} != header {meta['frame_dim']}")
        name = "question"
        question = [int(t) for t in cols[2].split()]
        name = "translation"
        translation = [int(t) for t in cols[3].split()]
        name = "informative_mask"
        if set(cols[4]) - {"0", "1"}:
            raise ValueError("bits must be 0/1")
        bits = [c == "1" for c in cols[4]]
        vocab = meta.get("vocab_size")
        for fname, ids in (("question", question), ("translation", translation)):
            name = fname
            if vocab is not None and any(not 0 <= i < vocab for i in ids):
                raise ValueError(f"token id outside vocabulary of size {vocab}")
        name = "informative_mask"
        return Sample(sid, VideoFeatureSequence(frames), TokenSequence(question), TokenSequence(translation), bits)
    except (ValueError, DataError) as exc:
        raise DataError(f"record {index}: field {name!r}: {exc}") from None


def load(path: str | Path) -> list[Sample]:
    """Read a corpus file; errors name the offending record index and field."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"corpus file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"empty corpus file: {path}")
    meta = _parse_header(lines[0])
    return [parse_record(line, i, meta) for i, line in enumerate(lines[1:]) if line.strip()]


def read_header(path: str | Path) -> dict[str, int]:
    with open(path, encoding="utf-8") as fh:
        return _parse_header(fh.readline().strip())


def write_corpus(out_dir: str | Path, cfg: GeneratorConfig) -> dict[str, list[Sample]]:
    """Generate and write train/dev/test files plus the vocabulary sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = generate(cfg)
    for split, samples in corpus.items():
        write_samples(out / f"{split}.txt", samples, cfg.vocab_size, cfg.frame_dim)
    (out / "vocab.txt").write_text(
        "".join(f"{i}\t{w}\n" for i, w in enumerate(vocabulary(cfg))), encoding="utf-8")
    return corpus


def load_vocab(path: str | Path) -> list[str]:
    words = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        idx, _, word = line.partition("\t")
        if int(idx) != i:
            raise DataError(f"vocab line {i}: expected id {i}, got {idx}")
        words.append(word)
    return words


def prototype_decode(frames: np.ndarray, prototypes: np.ndarray) -> list[int]:
    """Nearest-prototype label per frame with runs collapsed (content indices)."""
    d = ((frames[:, None, :] - prototypes[None, :, :]) ** 2).sum(-1)
    labels = d.argmin(axis=1)
    out = [int(labels[0])]
    for lab in labels[1:]:
        if lab != out[-1]:
            out.append(int(lab))
    return out


def config_replace(cfg: GeneratorConfig, **changes) -> GeneratorConfig:
    return dataclasses.replace(cfg, **changes)
