"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output adjoint to parent adjoints.
:func:`backward` orders the recorded graph topologically (the tape) and
replays the closures in reverse.

Broadcasting follows numpy for the elementwise ops; adjoints are summed back
to the operand shapes.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, index):
        return getitem(self, index)

    def backward(self) -> None:
        backward(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.name = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise -------------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


elementwise_mul = mul


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), bw, "div")


def power(x: Tensor, p: float) -> Tensor:
    out = x.data ** p

    def bw(g):
        return (g * p * x.data ** (p - 1),)

    return _result(out, (x,), bw, "pow")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# -- linear algebra and shape ops --------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            # shared weight: fold the leading axes instead of a batched product
            k = a.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out, dtype=DTYPE), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[i] for i in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def mean_pool(x: Tensor, axis: int = 0) -> Tensor:
    """Average over ``axis`` (sequence pooling)."""
    return mean(x, axis)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _result(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(out, tensors, bw, "concat")


def select_index(x: Tensor, index, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array (embedding lookup)."""
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[axis]
    if index.size and (index.min() < -n or index.max() >= n):
        raise IndexError(f"select_index: index out of range for axis of extent {n}")
    out = np.take(x.data, index, axis=axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        if axis == 0:
            np.add.at(gx, index, g)
        else:
            moved = np.moveaxis(gx, axis, 0)
            np.add.at(moved, index, np.moveaxis(g, list(range(axis, axis + index.ndim)),
                                                list(range(index.ndim))))
        return (gx,)

    return _result(out, (x,), bw, "select_index")


def getitem(x: Tensor, index) -> Tensor:
    """Basic slicing (no fancy indexing)."""
    out = x.data[index]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[index] += g
        return (gx,)

    return _result(np.array(out, dtype=DTYPE), (x,), bw, "getitem")


# -- normalisation and probabilities ------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis with population variance, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must be ({d},)")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _result(out, (x, gamma, beta), bw, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 0.0) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True)) + eps
    if np.any(norm == 0):
        raise ZeroDivisionError("l2_normalize: zero-norm vector")
    out = x.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _result(out, (x,), bw, "l2_normalize")


def cross_entropy(logits: Tensor, targets, ignore_id: int = -100) -> Tensor:
    """Mean negative log-likelihood over positions whose target != ``ignore_id``.

    ``logits`` has the class axis last; ``targets`` has the leading shape.
    With no counted position the loss is 0 and the adjoint is zero.
    """
    targets = np.asarray(targets, dtype=np.int64)
    k = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    keep = targets != ignore_id
    if np.any((targets[keep] < 0) | (targets[keep] >= k)):
        raise IndexError(f"cross_entropy: target id outside [0, {k})")
    count = int(keep.sum())
    if count == 0:
        return _result(np.array(0.0), (logits,), lambda g: (np.zeros_like(logits.data),), "cross_entropy")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    safe = np.where(keep, targets, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * keep).sum() / count

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[..., None],
                          np.take_along_axis(grad, safe[..., None], axis=-1) - 1.0, axis=-1)
        grad *= keep[..., None] * (g / count)
        return (grad,)

    return _result(np.array(loss), (logits,), bw, "cross_entropy")


# -- temporal conv / pooling ----------------------------------------------------

def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: str = "zeros") -> Tensor:
    """'Same'-length 1-D convolution over axis 1.

    x: [B, T, C_in]; weight: [K, C_in, C_out] with odd K; bias: [C_out].
    ``padding`` is ``"zeros"`` or ``"edge"`` (replicate the boundary frames).
    """
    if x.ndim != 3 or weight.ndim != 3 or weight.shape[1] != x.shape[2]:
        raise ShapeError(f"conv1d: input {x.shape} vs weight {weight.shape}")
    k = weight.shape[0]
    if k % 2 != 1:
        raise ShapeError("conv1d: kernel size must be odd for same padding")
    b, t, cin = x.shape
    half = k // 2
    if padding not in ("zeros", "edge"):
        raise ValueError(f"conv1d: unknown padding {padding!r}")
    mode = "constant" if padding == "zeros" else "edge"
    xp = np.pad(x.data, ((0, 0), (half, half), (0, 0)), mode=mode)
    # cols[b, t, j, c] = xp[b, t + j, c]
    cols = np.stack([xp[:, j:j + t, :] for j in range(k)], axis=2)
    w2 = weight.data.reshape(k * cin, -1)
    out = cols.reshape(b, t, k * cin) @ w2
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        gw = (cols.reshape(b * t, k * cin).T @ g.reshape(b * t, -1)).reshape(weight.shape)
        gcols = (g @ w2.T).reshape(b, t, k, cin)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, j:j + t, :] += gcols[:, :, j, :]
        gx = gxp[:, half:half + t, :].copy()
        if padding == "edge" and half:
            gx[:, 0, :] += gxp[:, :half, :].sum(axis=1)
            gx[:, -1, :] += gxp[:, half + t:, :].sum(axis=1)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)))
        return tuple(grads)

    return _result(out, parents, bw, "conv1d")


def max_pool1d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping max-pool over axis 1 (stride == kernel, trailing remainder dropped)."""
    b, t, c = x.shape
    tp = t // kernel
    if tp == 0:
        raise ShapeError(f"max_pool1d: length {t} shorter than kernel {kernel}")
    win = x.data[:, :tp * kernel, :].reshape(b, tp, kernel, c)
    arg = win.argmax(axis=2)
    out = np.take_along_axis(win, arg[:, :, None, :], axis=2)[:, :, 0, :]

    def bw(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, arg[:, :, None, :], g[:, :, None, :], axis=2)
        gx = np.zeros_like(x.data)
        gx[:, :tp * kernel, :] = gwin.reshape(b, tp * kernel, c)
        return (gx,)

    return _result(out, (x,), bw, "max_pool1d")


# -- backward -----------------------------------------------------------------

def build_tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of recorded tensors reachable from ``root``.

    Every tensor appears after all of its parents.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor needing grad."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss does not depend on any tensor requiring grad")
    tape = build_tape(loss)
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + pg
            else:
                adj[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# -- gradient checking ----------------------------------------------------------

def numerical_gradient(fn: Callable[[], Tensor], x: Tensor, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``fn()`` with respect to ``x.data``."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-relative difference; scales below ``floor`` are compared absolutely."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-4,
              floor: float = 1e-6) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Gradients whose norm is below ``floor`` (for example a bias feeding a
    normalisation, whose true gradient is zero) are compared absolutely, since
    finite differences there only measure rounding noise.
    """
    for t in inputs:
        t.zero_grad()
    backward(fn())
    worst = 0.0
    for t in inputs:
        analytic = t.grad.copy()
        numeric = numerical_gradient(fn, t, step)
        worst = max(worst, relative_error(analytic, numeric, floor))
    return worst
