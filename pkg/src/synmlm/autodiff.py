"""Reverse-mode automatic differentiation on numpy arrays.

A Tensor records the closure that propagates its gradient to its parents;
backward() walks the recorded graph once in reverse topological order.
Only the ops the transformer stack needs are provided. Training runs in
float32; gradient verification builds the same graphs in float64.

Every exposed op checks its output for NaN/Inf so numerical blowups fail
loudly at the op that produced them instead of ten steps later.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, InvalidStateError, NumericalError

DEFAULT_DTYPE = np.float32
_SQRT_2_OVER_PI = 0.7978845608028654
_GELU_C = 0.044715


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericalError(f"non-finite values produced by {op}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op})"

    # operator sugar; the module-level functions hold the real logic
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in tensors)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward_fn) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._consumed = False
    if _needs_grad(*parents):
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    else:
        out._parents = ()
        out._backward = None
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape numpy broadcast it up from."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _as_tensor(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.dtype))


# ------------------------------------------------------------- arithmetic

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    data = a.data + b.data

    def backward(out):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(out.grad, b.data.shape))

    return _result(data, (a, b), "add", backward)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    data = a.data * b.data

    def backward(out):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(out.grad * a.data, b.data.shape))

    return _result(data, (a, b), "mul", backward)


def scale(a: Tensor, c: float) -> Tensor:
    data = a.data * a.dtype.type(c)

    def backward(out):
        a._accumulate(out.grad * a.dtype.type(c))

    return _result(data, (a,), "scale", backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2]:
        raise InvalidArgumentError(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data

    def backward(out):
        if a.requires_grad or a._parents:
            ga = out.grad @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad or b._parents:
            gb = np.swapaxes(a.data, -1, -2) @ out.grad
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _result(data, (a, b), "matmul", backward)


# ----------------------------------------------------------- shape plumbing

def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(out):
        a._accumulate(out.grad.reshape(a.data.shape))

    return _result(data, (a,), "reshape", backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward(out):
        a._accumulate(out.grad.transpose(inverse))

    return _result(data, (a,), "transpose", backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=False))

    return _result(np.asarray(data), (a,), "sum", backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ------------------------------------------------------------- nonlinearity

def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(out):
        a._accumulate(out.grad * (a.data > 0))

    return _result(data, (a,), "relu", backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(out):
        a._accumulate(out.grad * (1.0 - data * data))

    return _result(data, (a,), "tanh", backward)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation; the exact-erf form is not needed at these scales."""
    x = a.data
    u = _SQRT_2_OVER_PI * (x + _GELU_C * x**3)
    t = np.tanh(u)
    data = 0.5 * x * (1.0 + t)

    def backward(out):
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        a._accumulate(out.grad * d.astype(a.dtype, copy=False))

    return _result(data.astype(a.dtype, copy=False), (a,), "gelu", backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(out):
        g = out.grad
        dot = (g * data).sum(axis=axis, keepdims=True)
        a._accumulate((g - dot) * data)

    return _result(data, (a,), "softmax", backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def backward(out):
        a._accumulate(out.grad / a.data)

    return _result(data, (a,), "log", backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; rate 0 is the identity. rng is explicit so training
    steps stay reproducible."""
    if not 0.0 <= rate < 1.0:
        raise InvalidArgumentError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate).astype(a.dtype) / a.dtype.type(1.0 - rate)
    data = a.data * keep

    def backward(out):
        a._accumulate(out.grad * keep)

    return _result(data, (a,), "dropout", backward)


# -------------------------------------------------------------- structured

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise InvalidArgumentError("embedding id out of range")
    data = table.data[ids]

    def backward(out):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, out.grad)

    return _result(data, (table,), "embedding", backward)


def gather_rows(x: Tensor, batch_idx: np.ndarray, pos_idx: np.ndarray) -> Tensor:
    """Select (batch, position) rows from a (B, T, D) activation."""
    batch_idx = np.asarray(batch_idx)
    pos_idx = np.asarray(pos_idx)
    B, T = x.data.shape[:2]
    if batch_idx.size and (batch_idx.min() < 0 or batch_idx.max() >= B):
        raise InvalidArgumentError("batch index out of range")
    if pos_idx.size and (pos_idx.min() < 0 or pos_idx.max() >= T):
        raise InvalidArgumentError("position index out of range")
    data = x.data[batch_idx, pos_idx]

    def backward(out):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        np.add.at(x.grad, (batch_idx, pos_idx), out.grad)

    return _result(data, (x,), "gather_rows", backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with learned scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gamma.data * xhat + beta.data

    def backward(out):
        n = x.data.shape[-1]
        if gamma.requires_grad or gamma._parents:
            red = tuple(range(out.grad.ndim - 1))
            gamma._accumulate((out.grad * xhat).sum(axis=red))
            beta._accumulate(out.grad.sum(axis=red))
        if x.requires_grad or x._parents:
            dxhat = out.grad * gamma.data
            term = n * dxhat - dxhat.sum(axis=-1, keepdims=True) \
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            x._accumulate((inv / n * term).astype(x.dtype, copy=False))

    return _result(data.astype(x.dtype, copy=False), (x, gamma, beta), "layer_norm", backward)


def cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood, fused with the softmax for stability."""
    targets = np.asarray(targets)
    if logits.data.ndim != 2:
        raise InvalidArgumentError("cross entropy expects (rows, classes) logits")
    rows, classes = logits.data.shape
    if targets.shape != (rows,):
        raise InvalidArgumentError(f"targets shape {targets.shape} != ({rows},)")
    if targets.size and (targets.min() < 0 or targets.max() >= classes):
        raise InvalidArgumentError("target class out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    data = np.asarray(-logp[np.arange(rows), targets].mean(), dtype=logits.dtype)

    def backward(out):
        p = e / denom
        p[np.arange(rows), targets] -= 1.0
        logits._accumulate(out.grad * p / rows)

    return _result(data, (logits,), "cross_entropy", backward)


# ---------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(leaf) to every reachable parameter's .grad."""
    if loss.data.size != 1:
        raise InvalidArgumentError("backward needs a scalar loss")
    if loss._consumed:
        raise InvalidStateError("backward already ran on this tape")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node)
        node._consumed = True


# -------------------------------------------------------------- parameters

class ParamStore:
    """Named trainable tensors in insertion order."""

    def __init__(self, dtype=None):
        self.dtype = dtype or DEFAULT_DTYPE
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise InvalidArgumentError(f"duplicate parameter {name!r}")
        t = Tensor(data, requires_grad=True, dtype=self.dtype)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_elements(self) -> int:
        return sum(t.data.size for t in self._params.values())


class Adam:
    """Adam with bias correction; moments live alongside the store."""

    def __init__(self, store: ParamStore, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in store.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in store.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.store.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericalError(f"non-finite gradient for {name!r}")
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "t": self.t}


# -------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "synmlm-checkpoint"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(path: str | Path, config: dict, store: ParamStore,
                    optimizer: Adam | None = None, extra: dict | None = None) -> None:
    """One JSON header line, then the little-endian element stream:
    parameters in listed order, then Adam first/second moments if present."""
    dtype_name = np.dtype(store.dtype).name
    code = _DTYPE_CODES[dtype_name]
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dtype": dtype_name,
        "config": config,
        "extra": extra or {},
        "params": [{"name": n, "shape": list(p.data.shape)} for n, p in store.items()],
        "optimizer": optimizer.state_dict() if optimizer else None,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode() + b"\n")
        for _, p in store.items():
            f.write(np.ascontiguousarray(p.data).astype(code, copy=False).tobytes())
        if optimizer:
            for slot in (optimizer.m, optimizer.v):
                for n in store.names():
                    f.write(np.ascontiguousarray(slot[n]).astype(code, copy=False).tobytes())


def load_checkpoint(path: str | Path) -> dict:
    """Returns {config, dtype, extra, arrays, optimizer, moments}."""
    with open(path, "rb") as f:
        header = json.loads(f.readline())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise InvalidArgumentError(f"{path} is not a checkpoint")
        code = _DTYPE_CODES[header["dtype"]]
        itemsize = np.dtype(code).itemsize

        def read_array(shape):
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(n * itemsize)
            if len(buf) != n * itemsize:
                raise InvalidArgumentError(f"{path} is truncated")
            return np.frombuffer(buf, dtype=code).reshape(shape).astype(header["dtype"])

        arrays = {p["name"]: read_array(p["shape"]) for p in header["params"]}
        moments = None
        if header["optimizer"] is not None:
            moments = {
                "m": {p["name"]: read_array(p["shape"]) for p in header["params"]},
                "v": {p["name"]: read_array(p["shape"]) for p in header["params"]},
            }
    return {
        "config": header["config"],
        "dtype": header["dtype"],
        "extra": header["extra"],
        "arrays": arrays,
        "optimizer": header["optimizer"],
        "moments": moments,
    }
