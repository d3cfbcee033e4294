"""Dense tensors with a recorded reverse-mode tape.

Every op computes its forward value with numpy and, when gradients are
enabled, attaches a closure that pushes the output gradient back into its
inputs. ``Tensor.backward`` walks the tape in reverse topological order.
Nothing here mutates an input's ``data``; backward closures only ever
accumulate into ``grad``.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import (
    DeterminismError,
    EmptySupportError,
    ParameterError,
    ShapeError,
    VocabularyError,
)

_PRECISIONS = {"single": np.float32, "double": np.float64}
_state = {"dtype": np.float32, "grad": True}


def set_precision(mode: str) -> None:
    if mode not in _PRECISIONS:
        raise ParameterError(f"precision must be one of {sorted(_PRECISIONS)}, got {mode!r}")
    _state["dtype"] = _PRECISIONS[mode]


def get_dtype():
    return _state["dtype"]


def precision_name() -> str:
    return "double" if _state["dtype"] is np.float64 else "single"


@contextlib.contextmanager
def precision(mode: str):
    old = _state["dtype"]
    set_precision(mode)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        if isinstance(data, np.ndarray) and data.dtype.kind == "f":
            self.data = data
        else:
            self.data = np.asarray(data, dtype=get_dtype())
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        if not self.requires_grad:
            return
        order = _toposort(self)
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, self.data.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)
    __getitem__ = lambda self, idx: index(self, idx)


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(np.array(data, dtype=get_dtype()), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=get_dtype()))


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _make(out: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    if _state["grad"] and any(p.requires_grad for p in parents):
        return Tensor(out, True, parents, backward)
    return Tensor(out)


# ----------------------------------------------------------------- broadcasting


def _check_broadcast(a: tuple, b: tuple) -> None:
    # equal shapes, scalars, a vector along the last axis, or same-rank size-1 expansion
    if a == b or a == () or b == ():
        return
    if len(b) == 1 and a and a[-1] == b[0]:
        return
    if len(a) == 1 and b and b[-1] == a[0]:
        return
    if len(a) == len(b) and all(x == y or x == 1 or y == 1 for x, y in zip(a, b)):
        return
    raise ShapeError(f"cannot broadcast shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ------------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: _accum(a, -g))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * (1.0 - out * out)))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = expit(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * out * (1.0 - out)))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0).astype(a.data.dtype), (a,), lambda g: _accum(a, g * pos))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * out))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: _accum(a, g / a.data))


_ELEMENTWISE = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu, "add": add, "mul": mul,
                "sub": sub, "exp": exp, "log": log}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch a pointwise op by name (``tanh``, ``sigmoid``, ``relu``, ``add``, ``mul``...)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ParameterError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ----------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or a batched ``[B, m, k] @ [B, k, n]``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(out, (a, b), backward)


def rowwise_matmul(a, b) -> Tensor:
    """``a[..., k] @ b[k, n]`` where every output row is computed the same way.

    BLAS kernels may round a row differently depending on where it sits in the
    batch; here each row is an ordered sum over ``k``, so reordering rows of
    ``a`` reorders the result exactly.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"rowwise_matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = (np.ascontiguousarray(a.data)[..., :, None] * b.data).sum(axis=-2)

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.reshape(-1, b.shape[0]).T @ g.reshape(-1, b.shape[1]))

    return _make(out, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ----------------------------------------------------------------- reductions / shape


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.shape)))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: _accum(a, np.transpose(g, inv)))


def index(a, idx) -> Tensor:
    """Basic (slice / integer) indexing."""
    a = _as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _make(a.data[idx], (a,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]

    def backward(g):
        for i, t in enumerate(ts):
            _accum(t, np.take(g, i, axis=axis))

    return _make(np.stack([t.data for t in ts], axis=axis), tuple(ts), backward)


def embedding(table, ids) -> Tensor:
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise VocabularyError(f"token id outside vocabulary of size {table.shape[0]}")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _accum(table, full)

    return _make(table.data[ids], (table,), backward)


def dropout(a, keep: float, rng) -> Tensor:
    """Inverted dropout; ``keep`` is the keep probability. ``rng=None`` disables it."""
    a = _as_tensor(a)
    if rng is None or keep >= 1.0:
        return a
    scale = ((rng.random(a.shape) < keep) / keep).astype(a.data.dtype)
    return mul(a, Tensor(scale))


# ----------------------------------------------------------------- normalisation


def softmax_masked(scores, mask=None, axis: int = -1) -> Tensor:
    """Exp-normalise ``scores`` over ``axis``; masked positions get exactly zero."""
    scores = _as_tensor(scores)
    s = scores.data
    if mask is None:
        keep = np.ones(s.shape, dtype=bool)
    else:
        mask = np.asarray(mask)
        if mask.shape != s.shape:
            raise ShapeError(f"mask shape {mask.shape} differs from scores {s.shape}")
        keep = mask.astype(bool)
    if not keep.any(axis=axis).all():
        raise EmptySupportError("softmax over an all-masked row")
    top = np.where(keep, s, -np.inf).max(axis=axis, keepdims=True)
    e = np.where(keep, np.exp(np.where(keep, s - top, 0.0)), 0.0)
    # summing in sorted order makes the normaliser independent of key order, bit for bit;
    # C order matters because numpy reduces other layouts in a different order
    total = np.ascontiguousarray(np.sort(e, axis=axis)).sum(axis=axis, keepdims=True)
    p = (e / total).astype(s.dtype)

    def backward(g):
        _accum(scores, p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return _make(p, (scores,), backward)


def ratio_normalize(scores, mask=None, axis: int = -1) -> Tensor:
    """Divide raw scores by their masked sum without exponentiating."""
    scores = _as_tensor(scores)
    m = np.ones(scores.shape) if mask is None else np.asarray(mask)
    if not m.astype(bool).any(axis=axis).all():
        raise EmptySupportError("normalisation over an all-masked row")
    masked = mul(scores, Tensor(m.astype(scores.data.dtype)))
    return div(masked, sum(masked, axis=axis, keepdims=True))


def _normalize(x: Tensor, axes: tuple, eps: float):
    d = x.data
    mu = d.mean(axis=axes, keepdims=True)
    centered = d - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    n = np.prod([d.shape[a] for a in axes])

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        _accum(x, inv * (g - gm - xhat * gxm))

    return _make(xhat, (x,), backward), mu, var, n


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x = _as_tensor(x)
    if x.shape[-1] < 2:
        raise ShapeError("layer_norm needs at least two features")
    xhat, *_ = _normalize(x, (x.ndim - 1,), eps)
    return add(mul(xhat, gain), bias)


def batch_normalize(x, eps: float):
    """Per-channel standardisation of ``x[B,H,W,C]`` over (B,H,W) using batch statistics.

    Returns the normalised tensor and the batch mean/variance (flat ``[C]`` arrays).
    """
    x = _as_tensor(x)
    xhat, mu, var, _ = _normalize(x, (0, 1, 2), eps)
    return xhat, mu.reshape(-1), var.reshape(-1)


# ----------------------------------------------------------------- convolution


def _same_padding(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv_output_size(size: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    if padding == "valid":
        if k > size:
            raise ShapeError(f"kernel {k} larger than input {size}")
        return (size - k) // stride + 1
    raise ParameterError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv2d(x, kernel, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of NHWC ``x`` with an HWIO ``kernel``."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[3] != kernel.shape[2]:
        raise ShapeError(f"conv2d shapes incompatible: {x.shape} * {kernel.shape}")
    B, H, W, C = x.shape
    kh, kw, _, cout = kernel.shape
    ho = conv_output_size(H, kh, stride, padding)
    wo = conv_output_size(W, kw, stride, padding)
    if padding == "same":
        (pt, pb), (pl, pr) = _same_padding(H, kh, stride), _same_padding(W, kw, stride)
        xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else x.data
    else:
        pt = pl = 0
        xp = x.data
    if kh > xp.shape[1] or kw > xp.shape[2]:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {xp.shape[1:3]}")
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    if kh == kw == 1:
        cols = xp[:, :hs:stride, :ws:stride, :]
    else:
        cols = np.concatenate(
            [xp[:, i:i + hs:stride, j:j + ws:stride, :] for i in range(kh) for j in range(kw)], axis=-1)
    cols2 = np.ascontiguousarray(cols).reshape(B * ho * wo, kh * kw * C)
    kmat = kernel.data.reshape(kh * kw * C, cout)
    out = (cols2 @ kmat).reshape(B, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(B * ho * wo, cout)
        if kernel.requires_grad:
            _accum(kernel, (cols2.T @ g2).reshape(kernel.shape))
        if x.requires_grad:
            dcols = (g2 @ kmat.T).reshape(B, ho, wo, kh * kw, C)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for n, (i, j) in enumerate((i, j) for i in range(kh) for j in range(kw)):
                dxp[:, i:i + hs:stride, j:j + ws:stride, :] += dcols[:, :, :, n, :]
            _accum(x, dxp[:, pt:pt + H, pl:pl + W, :])

    return _make(out, (x, kernel), backward)


def max_pool2d(x, size: int, stride: int, padding: str = "same") -> Tensor:
    x = _as_tensor(x)
    B, H, W, C = x.shape
    ho = conv_output_size(H, size, stride, padding)
    wo = conv_output_size(W, size, stride, padding)
    if padding == "same":
        (pt, pb), (pl, pr) = _same_padding(H, size, stride), _same_padding(W, size, stride)
        xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=-np.inf)
    else:
        pt = pl = 0
        xp = x.data
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    offsets = [(i, j) for i in range(size) for j in range(size)]
    windows = np.stack([xp[:, i:i + hs:stride, j:j + ws:stride, :] for i, j in offsets])
    arg = windows.argmax(axis=0)
    out = np.take_along_axis(windows, arg[None], axis=0)[0]

    def backward(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for n, (i, j) in enumerate(offsets):
            dxp[:, i:i + hs:stride, j:j + ws:stride, :] += g * (arg == n)
        _accum(x, dxp[:, pt:pt + H, pl:pl + W, :])

    return _make(out, (x,), backward)


def global_max_pool(x) -> Tensor:
    """Spatial max of ``x[B,H,W,C]`` giving ``[B,C]``."""
    x = _as_tensor(x)
    B, H, W, C = x.shape
    flat = x.data.reshape(B, H * W, C)
    arg = flat.argmax(axis=1)
    out = np.take_along_axis(flat, arg[:, None, :], axis=1)[:, 0, :]

    def backward(g):
        full = np.zeros_like(flat)
        np.put_along_axis(full, arg[:, None, :], g[:, None, :], axis=1)
        _accum(x, full.reshape(x.shape))

    return _make(out, (x,), backward)


# ----------------------------------------------------------------- losses


def log_softmax_np(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def cross_entropy(logits, targets, weights=None) -> Tensor:
    """Weighted mean of ``-log softmax(logits)[target]`` over all leading positions."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not align with targets {targets.shape}")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise EmptySupportError("no unmasked target positions")
    logp = log_softmax_np(logits.data)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = np.asarray(-(w * picked).sum() / total, dtype=logits.data.dtype)

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None],
                          np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        _accum(logits, (g * grad * (w / total)[..., None]).astype(logits.data.dtype))

    return _make(loss, (logits,), backward)


# ----------------------------------------------------------------- parameters


class Parameter:
    """A named model weight with its Adam moment buffers."""

    def __init__(self, name: str, value: np.ndarray, trainable: bool = True):
        self.name = name
        self.value = Tensor(np.array(value, dtype=get_dtype()))
        self.value.grad = np.zeros_like(self.value.data)
        self.adam_m = np.zeros_like(self.value.data)
        self.adam_v = np.zeros_like(self.value.data)
        self.trainable = trainable

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self._trainable = bool(flag)
        self.value.requires_grad = self._trainable

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray:
        return self.value.grad

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def zero_grad(self) -> None:
        self.value.grad = np.zeros_like(self.value.data)

    def cast(self, dtype) -> None:
        self.value.data = self.value.data.astype(dtype)
        self.adam_m = self.adam_m.astype(dtype)
        self.adam_v = self.adam_v.astype(dtype)
        self.zero_grad()

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


class ParamStore:
    """Ordered, name-unique collection of parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value, trainable: bool = True) -> Parameter:
        if name in self._params:
            raise ParameterError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value, trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def trainable(self) -> list[Parameter]:
        return [p for p in self._params.values() if p.trainable]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def cast(self, dtype) -> None:
        for p in self._params.values():
            p.cast(dtype)


# ----------------------------------------------------------------- gradient oracle


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str | None
    per_param: dict = field(default_factory=dict)
    n_checked: int = 0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def _scalar(value) -> float:
    return float(value.data) if isinstance(value, Tensor) else float(value)


def finite_difference_check(f: Callable[[], Tensor], params: Iterable[Parameter],
                            eps: float = 1e-5, floor: float = 1e-6,
                            max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` takes no arguments and reads the parameters' current values. Relative
    error per scalar is ``|a - n| / max(|a|, |n|, floor)``. Frozen parameters are
    skipped. ``max_entries`` subsamples large tensors (``None`` checks every scalar).
    """
    if not eps > 0:
        raise ParameterError("eps must be positive")
    params = [p for p in params if p.trainable]
    for p in params:
        if p.data.dtype != np.float64:
            raise ParameterError(f"{p.name} is not double precision; gradient checks need it")

    with no_grad():
        first, second = _scalar(f()), _scalar(f())
    if first != second:
        raise DeterminismError(f"f is not deterministic ({first!r} vs {second!r})")

    for p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = {p.name: p.grad.copy() for p in params}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0, None)
    with no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, max_entries, replace=False)
            worst = 0.0
            a_flat = analytic[p.name].reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = _scalar(f())
                flat[i] = orig - eps
                fm = _scalar(f())
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                a = a_flat[i]
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
            report.per_param[p.name] = worst
            report.n_checked += len(idx)
            if worst >= report.max_rel_err:
                report.max_rel_err, report.worst_param = worst, p.name
    return report
