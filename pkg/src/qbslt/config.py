"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .data import GeneratorConfig
from .model import FUSION_MODES, ModelConfig
from .stage1 import Stage1Config
from .stage2 import Stage2Config

RUN_ROOT_ENV = "QBSLT_RUN_ROOT"


class ConfigError(Exception):
    """Unparseable or invalid configuration."""


@dataclass
class RunConfig:
    # paths (relative ones resolve against $QBSLT_RUN_ROOT, else the working directory)
    run_dir: str = "runs/default"
    corpus_dir: str = "runs/corpus"
    stage1_checkpoint: str = ""
    checkpoint: str = ""
    hyps_path: str = ""
    refs_path: str = ""
    split: str = "test"
    sample_id: str = ""
    cold_start: bool = False
    seed: int = 0
    # synthetic data
    content_vocab: int = 50
    distractor_vocab: int = 50
    frame_dim: int = 16
    frames_min: int = 2
    frames_max: int = 5
    frame_noise: float = 0.5
    rho: float = 0.8
    n_train: int = 500
    n_dev: int = 100
    n_test: int = 100
    # model
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    # stage 1
    s1_steps: int = 300
    s1_batch_size: int = 32
    s1_optimizer: str = "adam"
    s1_lr: float = 1e-3
    tau: float = 0.1
    mask_ratio: float = 0.15
    # stage 2
    fusion: str = "ssaw"
    epochs: int = 40
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 3e-3
    momentum: float = 0.9
    clip: float = 1.0
    max_len: int = 12
    eval_every: int = 1
    # ablation
    arms: str = "ssaw,concat"
    ablation_seeds: str = "0,1,2"

    def validate(self) -> None:
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {', '.join(FUSION_MODES)}, got {self.fusion!r}")
        for arm in self.arm_list():
            if arm not in FUSION_MODES:
                raise ConfigError(f"unknown ablation arm {arm!r}")
        if self.split not in ("train", "dev", "test"):
            raise ConfigError(f"split must be train, dev or test, got {self.split!r}")
        for opt in (self.optimizer, self.s1_optimizer):
            if opt not in ("sgd", "adam"):
                raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {opt!r}")
        if not 0 <= self.rho <= 1:
            raise ConfigError("rho must lie in [0, 1]")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not 0 <= self.mask_ratio <= 1:
            raise ConfigError("mask_ratio must lie in [0, 1]")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        try:
            self.seed_list()
        except ValueError:
            raise ConfigError(f"ablation_seeds must be comma-separated integers, got {self.ablation_seeds!r}")

    def arm_list(self) -> list[str]:
        return [a.strip() for a in self.arms.split(",") if a.strip()]

    def seed_list(self) -> list[int]:
        return [int(s) for s in self.ablation_seeds.split(",") if s.strip()]

    # -- views onto the component configs ----------------------------------------
    def generator(self) -> GeneratorConfig:
        return GeneratorConfig(
            content_vocab=self.content_vocab, distractor_vocab=self.distractor_vocab, frame_dim=self.frame_dim,
            frames_per_gesture=(self.frames_min, self.frames_max), frame_noise=self.frame_noise, rho=self.rho,
            n_train=self.n_train, n_dev=self.n_dev, n_test=self.n_test, seed=self.seed)

    def model(self, vocab_size: int, frame_dim: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, frame_dim=frame_dim, d_model=self.d_model, n_heads=self.n_heads,
                           d_ff=self.d_ff, enc_layers=self.enc_layers, dec_layers=self.dec_layers, seed=self.seed)

    def stage1(self) -> Stage1Config:
        return Stage1Config(steps=self.s1_steps, batch_size=self.s1_batch_size, optimizer=self.s1_optimizer,
                            lr=self.s1_lr, momentum=self.momentum, clip=self.clip, tau=self.tau,
                            mask_ratio=self.mask_ratio, seed=self.seed)

    def stage2(self) -> Stage2Config:
        return Stage2Config(epochs=self.epochs, batch_size=self.batch_size, optimizer=self.optimizer, lr=self.lr,
                            momentum=self.momentum, clip=self.clip, fusion=self.fusion, max_len=self.max_len,
                            eval_every=self.eval_every, seed=self.seed)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if p.is_absolute():
            return p
        return Path(os.environ.get(RUN_ROOT_ENV, ".")) / p

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(raw: str, kind: type, key: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError("expected true or false")
            return low == "true"
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}: {exc}") from None


_TYPES = {"bool": bool, "int": int, "float": float, "str": str}


def field_types() -> dict[str, type]:
    return {f.name: _TYPES[f.type] if isinstance(f.type, str) else f.type for f in fields(RunConfig)}


def serialize(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(RunConfig))


def apply_overrides(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    types = field_types()
    changes = {}
    for key, raw in pairs.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _parse_value(raw, types[key], key)
    return dataclasses.replace(cfg, **changes)


def parse(text: str) -> RunConfig:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value.strip()
    cfg = apply_overrides(RunConfig(), pairs)
    cfg.validate()
    return cfg


def load(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse(path.read_text(encoding="utf-8"))


def digest(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize(cfg).encode("utf-8")).hexdigest()
