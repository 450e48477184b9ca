"""Dense float64 tensors with a reverse-mode gradient tape.

The tape is rebuilt on every forward pass and released by ``backward``.
Tensors are immutable values after construction (optimizers mutate the
underlying buffer of leaf parameters between passes, never mid-graph).
All arithmetic is 64-bit; broadcasting follows numpy rules and any
incompatible pair of shapes raises :class:`ShapeError` naming both.
"""

from __future__ import annotations

import struct
import threading
import weakref
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes cannot be combined."""


class GradientError(RuntimeError):
    """Raised on invalid gradient requests (e.g. non-scalar backward root)."""


# --------------------------------------------------------------------------
# allocation tracking (used by the benchmark harness)
# --------------------------------------------------------------------------

class _AllocTracker:
    """Counts live bytes held by Tensor buffers within a tracking window.

    Buffers registered in an earlier window may be garbage-collected later;
    the window id keeps their release from corrupting the current count.
    """

    def __init__(self):
        self.enabled = False
        self.current = 0
        self.peak = 0
        self.window = 0

    def register(self, tensor: "Tensor"):
        if not self.enabled:
            return
        nbytes = tensor.data.nbytes
        self.current += nbytes
        if self.current > self.peak:
            self.peak = self.current
        weakref.finalize(tensor, self._release, nbytes, self.window)

    def _release(self, nbytes: int, window: int):
        if window == self.window:
            self.current -= nbytes

    def reset_peak(self):
        self.peak = self.current


_tracker = _AllocTracker()


def track_allocations(enabled: bool):
    if enabled:
        _tracker.window += 1
        _tracker.current = 0
        _tracker.peak = 0
    _tracker.enabled = enabled


def reset_peak_allocated():
    _tracker.reset_peak()


def peak_allocated_bytes() -> int:
    return _tracker.peak


# --------------------------------------------------------------------------
# grad mode
# --------------------------------------------------------------------------

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager disabling tape construction (inference mode)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


# --------------------------------------------------------------------------
# Tensor
# --------------------------------------------------------------------------

class Tensor:
    """A dense float64 array plus an optional backward rule on the tape.

    Leaf tensors created with ``requires_grad=True`` are parameters; after
    ``backward`` on a scalar root their ``.grad`` holds d(root)/d(param).
    """

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents",
                 "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._backward: Callable | None = None
        self._parents: tuple = ()
        self.name = name
        _tracker.register(self)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def backward(self, release_graph: bool = True):
        backward(self, release_graph=release_graph)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor],
          backward_rule: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_rule
    return out


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# elementwise ops
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), rule)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def rule(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _node(out, (a, b), rule)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar kept off the tape (e.g. the clamped dt)."""
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def pow_const(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data ** p

    def rule(g):
        return (g * p * a.data ** (p - 1.0),)

    return _node(out, (a,), rule)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # exp overflow at very negative x saturates to 0 exactly, which is the
    # right limit; suppress the spurious warning
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def rule(g):
        return (g * _sigmoid_np(x),)

    return _node(out, (a,), rule)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def rule(g):
        return (g * (a.data > 0.0),)

    return _node(out, (a,), rule)


def absolute(a: Tensor) -> Tensor:
    # subgradient 0 at the kink
    out = np.abs(a.data)

    def rule(g):
        return (g * np.sign(a.data),)

    return _node(out, (a,), rule)


def elementwise(op: str, *args: Tensor) -> Tensor:
    """Dispatch table for the basic pointwise operations by name."""
    unary = {"tanh": tanh, "sigmoid": sigmoid, "softplus": softplus,
             "exp": exp, "neg": neg, "relu": relu, "log": log}
    binary = {"add": add, "mul": mul, "sub": sub, "div": div}
    if op in unary:
        (a,) = args
        return unary[op](_as_tensor(a))
    if op in binary:
        a, b = args
        return binary[op](_as_tensor(a), _as_tensor(b))
    raise ValueError(f"unknown elementwise op {op!r}")


# --------------------------------------------------------------------------
# shape ops
# --------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    orig = a.shape
    return _node(out, (a,), lambda g: (g.reshape(orig),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = np.swapaxes(a.data, ax1, ax2)
    return _node(out, (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}")
    orig = a.shape
    return _node(np.ascontiguousarray(out), (a,),
                 lambda g: (_unbroadcast(g, orig),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tensors, rule)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries from ``start`` along ``axis`` (view, no copy)."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx]

    def rule(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _node(out, (a,), rule)


# --------------------------------------------------------------------------
# reductions and matmul
# --------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), rule)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; batch axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must have rank >= 2, "
                         f"got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes "
                         f"{a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and "
                         f"{b.shape} do not broadcast")

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), rule)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis``; outputs are nonnegative and sum to 1."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _node(out, (a,), rule)


def masked_softmax(a: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over entries where ``mask`` is true; masked entries get exactly 0.

    ``mask`` is a constant (never differentiated). Rows with no valid entry
    are rejected: the caller's masking contract must leave at least one.
    """
    mask = np.asarray(mask, dtype=bool)
    valid = np.broadcast_to(mask, a.shape)
    if not valid.any(axis=axis).all():
        raise ValueError("masked_softmax: some rows have no valid entries")
    neg_inf_free = np.where(valid, a.data, -np.inf)
    shift = neg_inf_free.max(axis=axis, keepdims=True)
    e = np.where(valid, np.exp(a.data - shift), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    out = e / denom

    def rule(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _node(out, (a,), rule)


def gather_keys(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather per-query key vectors: x [B,H,T_k,D], idx [B,H,T_q,K] -> [B,H,T_q,K,D].

    Indices are constants (hard selection); gradients scatter-add into x.
    """
    idx = np.asarray(idx)
    B, H, T_k, D = x.shape
    out = np.take_along_axis(x.data[:, :, None, :, :],
                             idx[:, :, :, :, None], axis=3)

    def rule(g):
        gx = np.zeros_like(x.data)
        bb = np.arange(B)[:, None, None, None]
        hh = np.arange(H)[None, :, None, None]
        np.add.at(gx, (bb, hh, idx), g)
        return (gx,)

    return _node(out, (x,), rule)


def layer_norm(x: Tensor, gain: Tensor | None = None,
               bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; optional learnable affine."""
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = pow_const(add(var, Tensor(eps)), -0.5)
    out = mul(centered, inv)
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------

def backward(root: Tensor, release_graph: bool = True):
    """Reverse-mode pass from a scalar root.

    Populates ``.grad`` on every reachable leaf with ``requires_grad``;
    each node's rule runs exactly once. The tape is released afterwards
    unless ``release_graph`` is false.
    """
    if root.data.size != 1:
        raise GradientError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return

    # iterative topological order (graphs can be thousands of nodes deep)
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if release_graph:
            node._backward = None
            node._parents = ()


# --------------------------------------------------------------------------
# serialization: rank u32, dims u32 each, little-endian f64 payload
# --------------------------------------------------------------------------

def serialize_tensor(t: Tensor) -> bytes:
    dims = t.shape
    header = struct.pack("<I", len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    payload = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    return header + payload


def deserialize_tensor(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Read one tensor starting at ``offset``; returns (tensor, next offset)."""
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    offset += 8 * count
    return Tensor(data.astype(np.float64).reshape(dims)), offset


# --------------------------------------------------------------------------
# parameter initialization
# --------------------------------------------------------------------------

def uniform_init(rng: np.random.Generator, shape, fan_in: int,
                 name: str | None = None) -> Tensor:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape),
                  requires_grad=True, name=name)


def zeros_param(shape, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)
