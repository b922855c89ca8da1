"""Parameter containers, basic layers, optimizers and the checkpoint format."""

from __future__ import annotations

import hashlib
import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"QBSLTCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Unreadable checkpoint or parameter-name/shape mismatch."""


class Module:
    """Tree of named parameters (Tensors) and buffers (numpy arrays).

    Attributes holding a :class:`Tensor` with ``requires_grad`` are
    parameters; :class:`Module` attributes and lists of modules are walked
    recursively. Buffers are registered explicitly with
    :meth:`register_buffer` and travel with checkpoints.
    """

    training = True

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        if "_buffers" not in self.__dict__:
            self.__dict__["_buffers"] = OrderedDict()
        self._buffers[name] = np.asarray(value, dtype=np.float64)

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, val in self.__dict__.items():
            if key.startswith("_"):
                continue
            yield key, val

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in self._children():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, "BufferRef"]]:
        for key in self.__dict__.get("_buffers", {}):
            yield prefix + key, BufferRef(self, key)
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())
        for n, ref in self.named_buffers():
            state[n] = ref.get().copy()
        return state

    def load_state_dict(self, state: dict, strict: bool = True, prefixes: tuple[str, ...] | None = None) -> list[str]:
        """Copy arrays into matching parameters and buffers; return the loaded names.

        With ``prefixes`` only names starting with one of them are considered.
        """
        targets: dict[str, object] = dict(self.named_parameters())
        targets.update(dict(self.named_buffers()))
        if prefixes is not None:
            targets = {n: v for n, v in targets.items() if n.startswith(prefixes)}
        loaded = []
        for name, target in targets.items():
            if name not in state:
                if strict:
                    raise CheckpointError(f"missing parameter {name!r} in checkpoint")
                continue
            value = np.asarray(state[name], dtype=np.float64)
            current = target.data if isinstance(target, Tensor) else target.get()
            if value.shape != current.shape:
                raise CheckpointError(f"shape mismatch for {name!r}: checkpoint {value.shape}, model {current.shape}")
            if isinstance(target, Tensor):
                target.data = value.copy()
                target.zero_grad()
            else:
                target.set(value.copy())
            loaded.append(name)
        return loaded


class BufferRef:
    def __init__(self, module: Module, key: str):
        self.module, self.key = module, key

    def get(self) -> np.ndarray:
        return self.module._buffers[self.key]

    def set(self, value: np.ndarray) -> None:
        self.module._buffers[self.key] = value


def param(array: np.ndarray) -> Tensor:
    return Tensor(array, requires_grad=True)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return param(rng.uniform(-bound, bound, size=shape or (fan_in, fan_out)))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = xavier(rng, d_in, d_out)
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


# -- optimizers -----------------------------------------------------------------

def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total


class SGD:
    """Gradient descent with heavy-ball momentum."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.98), eps: float = 1e-9):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, params: list[Tensor], lr: float, momentum: float = 0.9):
    if name == "sgd":
        return SGD(params, lr=lr, momentum=momentum)
    if name == "adam":
        return Adam(params, lr=lr)
    raise ValueError(f"unknown optimizer {name!r} (expected 'sgd' or 'adam')")


# -- checkpoint file --------------------------------------------------------------
# layout: magic(8) | u32 version | u32 count | count * record
# record: u16 name_len | name utf-8 | u8 ndim | ndim * u32 extents | prod(extents) * f64 (LE)

def encode_checkpoint(state: dict) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(state))]
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        version, count = struct.unpack_from("<II", blob, 8)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}; supported: {CHECKPOINT_VERSION}")
        pos = 16
        state: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 8 * size > len(blob):
                raise CheckpointError(f"truncated checkpoint at record {name!r}")
            state[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return state


def save_checkpoint(path: str | Path, state: dict) -> None:
    Path(path).write_bytes(encode_checkpoint(state))


def load_checkpoint(path: str | Path) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


def array_digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()


def state_digests(state: dict) -> dict[str, str]:
    return {name: array_digest(arr) for name, arr in state.items()}
