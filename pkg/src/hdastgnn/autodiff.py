"""Dense reverse-mode differentiation on top of numpy.

Every ``Tensor`` produced by an op remembers its parents and a closure that
pushes the output gradient back to them. Creation order is a valid
topological order, so ``backward`` only has to sort the reachable nodes by
their id and walk them once in reverse.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

_ids = itertools.count()

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class StateError(RuntimeError):
    pass


def set_default_dtype(dtype) -> None:
    global DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    DEFAULT_DTYPE = dtype.type


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward", "_id", "_consumed")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward=None):
        if isinstance(value, np.ndarray) and value.dtype in (np.float32, np.float64):
            self.value = value
        else:
            self.value = np.asarray(value, dtype=DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._id = next(_ids)
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value, name: str | None = None) -> Tensor:
    value = np.array(value, dtype=DEFAULT_DTYPE)
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite values in parameter {name!r}")
    return Tensor(value, requires_grad=True, name=name)


def constant(value) -> Tensor:
    value = np.asarray(value, dtype=DEFAULT_DTYPE)
    if not np.all(np.isfinite(value)):
        raise NumericError("non-finite values in input tensor")
    return Tensor(value)


def _result(value: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(value)
    return Tensor(value, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)


_borrowed: set[int] = set()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # the first incoming gradient is stored without a copy; a second one
    # allocates a fresh sum so shared buffers are never written in place
    if not t.requires_grad:
        return
    if t.grad is None:
        if g.shape != t.shape or g.dtype != t.value.dtype:
            g = np.array(np.broadcast_to(g, t.shape), dtype=t.value.dtype)
        t.grad = g
        _borrowed.add(t._id)
    elif t._id in _borrowed:
        t.grad = t.grad + g
        _borrowed.discard(t._id)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out_value = a.value + b.value

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(out_value, (a, b), _bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out_value = a.value * b.value

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.value, b.shape))

    return _result(out_value, (a, b), _bw)


def neg(a: Tensor) -> Tensor:
    def _bw(g):
        _accumulate(a, -g)

    return _result(-a.value, (a,), _bw)


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0

    def _bw(g):
        _accumulate(a, g * mask)

    return _result(a.value * mask, (a,), _bw)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(a.value > 0, 1.0, slope).astype(a.value.dtype)

    def _bw(g):
        _accumulate(a, g * scale)

    return _result(a.value * scale, (a,), _bw)


def dropout(a: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or ``train`` is off."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(a.shape) >= rate).astype(a.value.dtype) / (1.0 - rate)

    def _bw(g):
        _accumulate(a, g * mask)

    return _result(a.value * mask, (a,), _bw)


def huber(pred, target, delta: float) -> Tensor:
    """Elementwise Huber loss of the residual ``target - pred``."""
    if delta <= 0:
        raise ValueError("huber delta must be positive")
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"huber: shapes {pred.shape} and {target.shape} differ")
    r = target.value - pred.value
    small = np.abs(r) <= delta
    out_value = np.where(small, 0.5 * r * r, delta * (np.abs(r) - 0.5 * delta))
    # d/dr of the loss; clip(r) covers both branches
    dr = np.clip(r, -delta, delta)

    def _bw(g):
        if pred.requires_grad:
            _accumulate(pred, -g * dr)
        if target.requires_grad:
            _accumulate(target, g * dr)

    return _result(out_value, (pred, target), _bw)


# ---------------------------------------------------------------- reductions

def sum_(a: Tensor, axis=None) -> Tensor:
    out_value = np.sum(a.value, axis=axis)

    def _bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _result(np.asarray(out_value), (a,), _bw)


def mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis), 1.0 / count)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., n) and a 2-d ``b`` of shape (n, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out_value = a.value @ b.value

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.value.T)
        if b.requires_grad:
            a2 = a.value.reshape(-1, a.shape[-1])
            _accumulate(b, a2.T @ g.reshape(-1, b.shape[1]))

    return _result(out_value, (a, b), _bw)


def head_dot(p: Tensor, a: Tensor) -> Tensor:
    """Per-head inner products: ``p`` (..., H, Ch) with ``a`` (H, Ch) -> (..., H)."""
    p, a = as_tensor(p), as_tensor(a)
    if a.ndim != 2 or p.shape[-2:] != a.shape:
        raise ShapeError(f"head_dot: incompatible shapes {p.shape} and {a.shape}")
    h, ch = a.shape
    rows = np.arange(h * ch)
    cols = np.repeat(np.arange(h), ch)
    block = np.zeros((h * ch, h), dtype=a.value.dtype)
    block[rows, cols] = a.value.reshape(-1)
    p2 = p.value.reshape(-1, h * ch)
    out_value = (p2 @ block).reshape(p.shape[:-1])

    def _bw(g):
        g2 = g.reshape(-1, h)
        if p.requires_grad:
            _accumulate(p, (g2 @ block.T).reshape(p.shape))
        if a.requires_grad:
            _accumulate(a, (p2.T @ g2)[rows, cols].reshape(h, ch))

    return _result(out_value, (p, a), _bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out_value = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None

    def _bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(out_value, (a,), _bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def _bw(g):
        _accumulate(a, np.transpose(g, inverse))

    return _result(np.transpose(a.value, axes), (a,), _bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out_value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(index)])

    return _result(out_value, tensors, _bw)


def getitem(a: Tensor, key) -> Tensor:
    """Basic slicing and integer indexing (fancy indexing goes through ``gather_rows``)."""
    out_value = a.value[key]

    def _bw(g):
        full = np.zeros_like(a.value)
        np.add.at(full, key, g)
        _accumulate(a, full)

    return _result(np.array(out_value), (a,), _bw)


def _scatter_matrix(index: np.ndarray, n: int) -> sp.csr_matrix:
    m = len(index)
    return sp.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n, m))


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``a[index]`` along axis 0; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.shape[0]} rows")
    out_value = a.value[index]

    def _bw(g):
        s = _scatter_matrix(index, a.shape[0])
        _accumulate(a, np.asarray(s @ g.reshape(len(index), -1)).reshape(a.shape))

    return _result(out_value, (a,), _bw)


def segment_sum(a: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``a`` that share a segment id; output has ``num_segments`` rows."""
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if len(segment_ids) != a.shape[0]:
        raise ShapeError(f"segment_sum: {len(segment_ids)} ids for {a.shape[0]} rows")
    s = _scatter_matrix(segment_ids, num_segments)
    out_value = np.asarray(s @ a.value.reshape(a.shape[0], -1)).reshape((num_segments,) + a.shape[1:])

    def _bw(g):
        _accumulate(a, g[segment_ids])

    return _result(out_value, (a,), _bw)


def _group_max(x: np.ndarray, groups: np.ndarray, num_groups: int) -> np.ndarray:
    order = np.argsort(groups, kind="stable")
    sorted_groups = groups[order]
    starts = np.flatnonzero(np.r_[True, sorted_groups[1:] != sorted_groups[:-1]])
    out = np.zeros((num_groups,) + x.shape[1:], dtype=x.dtype)
    out[sorted_groups[starts]] = np.maximum.reduceat(x[order], starts, axis=0)
    return out


def softmax_over_groups(scores: Tensor, groups: np.ndarray, num_groups: int) -> Tensor:
    """Softmax along axis 0 independently inside every group of rows."""
    groups = np.asarray(groups, dtype=np.int64)
    if len(groups) != scores.shape[0]:
        raise ShapeError(f"softmax_over_groups: {len(groups)} group ids for {scores.shape[0]} rows")
    x = scores.value
    if len(groups) == 0:
        return _result(x.copy(), (scores,), lambda g: None)
    s = _scatter_matrix(groups, num_groups)
    flat = x.reshape(len(groups), -1)
    shifted = np.exp(flat - _group_max(flat, groups, num_groups)[groups])
    denom = np.asarray(s @ shifted)
    out_flat = shifted / denom[groups]
    out_value = out_flat.reshape(x.shape)

    def _bw(g):
        gf = g.reshape(len(groups), -1)
        dot = np.asarray(s @ (gf * out_flat))
        _accumulate(scores, (out_flat * (gf - dot[groups])).reshape(x.shape))

    return _result(out_value, (scores,), _bw)


def _conv_cols(x: np.ndarray, p: int) -> np.ndarray:
    """(N, T, C) -> (N*T, p*C) zero-padded sliding windows, channel index fastest."""
    n, t, c = x.shape
    pad = p // 2
    xp = np.zeros((n, t + 2 * pad, c), dtype=x.dtype)
    xp[:, pad:pad + t] = x
    windows = np.lib.stride_tricks.sliding_window_view(xp, (p, c), axis=(1, 2))  # (N, T, 1, p, C)
    return np.ascontiguousarray(windows).reshape(n * t, p * c)


def conv1d_same(x: Tensor, kernel: Tensor) -> Tensor:
    """Zero-padded stride-1 temporal convolution.

    ``x`` is (N, T, C_in), ``kernel`` is (p, C_in, C_out) with odd ``p``;
    ``out[n, t] = sum_i x[n, t + i - p // 2] @ kernel[i]``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 3 or x.ndim != 3 or x.shape[2] != kernel.shape[1]:
        raise ShapeError(f"conv1d_same: incompatible shapes {x.shape} and {kernel.shape}")
    p, c_in, c_out = kernel.shape
    if p % 2 == 0:
        raise ValueError(f"conv1d_same needs an odd kernel size, got {p}")
    n, t, _ = x.shape
    cols = _conv_cols(x.value, p)
    k2 = kernel.value.reshape(p * c_in, c_out)
    out_value = (cols @ k2).reshape(n, t, c_out)

    def _bw(g):
        g2 = g.reshape(n * t, c_out)
        if kernel.requires_grad:
            _accumulate(kernel, (cols.T @ g2).reshape(p, c_in, c_out))
        if x.requires_grad:
            # transposed convolution: flipped taps, swapped channel axes
            flipped = kernel.value[::-1].transpose(0, 2, 1).reshape(p * c_out, c_in)
            _accumulate(x, (_conv_cols(g, p) @ flipped).reshape(n, t, c_in))

    return _result(out_value, (x, kernel), _bw)


# ---------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Fill ``.grad`` of every reachable tensor that requires a gradient.

    Parameter gradients accumulate across calls until ``zero_grad``. Each
    graph can only be walked once; intermediate buffers are released.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise StateError("backward already ran on this graph; rebuild the forward pass")
    if not np.all(np.isfinite(loss.value)):
        raise NumericError(f"non-finite loss {loss.value!r}")
    loss._consumed = True
    if not loss.requires_grad:
        return

    seen = {loss._id: loss}
    stack = [loss]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and p._id not in seen:
                seen[p._id] = p
                stack.append(p)
    order = sorted(seen.values(), key=lambda t: t._id, reverse=True)

    loss.grad = np.ones_like(loss.value)
    for node in order:
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
        # release the intermediate graph; leaves keep their gradient
        node._backward = None
        node._parents = ()
        node.grad = None if node is not loss else node.grad
    # leaves keep gradients across calls, so they must own writable buffers
    for node in order:
        if node._id in _borrowed and node.grad is not None:
            node.grad = np.array(node.grad)
    _borrowed.clear()


# ---------------------------------------------------------------- checks

@dataclass
class GradCheckResult:
    max_rel_error: float
    nan_count: int
    analytic: np.ndarray
    numeric: np.ndarray


def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5,
               eps: float = 1e-6) -> GradCheckResult:
    """Compare backward against central finite differences at ``x``."""
    x = np.array(x, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    backward(f(xt))
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x)

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(x.copy())).value)
        flat[i] = orig - h
        fm = float(f(Tensor(x.copy())).value)
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + eps)
    nan_count = int(np.sum(~np.isfinite(err)))
    finite = err[np.isfinite(err)]
    return GradCheckResult(float(finite.max()) if finite.size else 0.0, nan_count, analytic, numeric)


def param_grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                     eps: float = 1e-6, max_entries: int | None = None,
                     rng: np.random.Generator | None = None) -> GradCheckResult:
    """Finite-difference check of parameter gradients of a closure-built loss.

    ``max_entries`` limits the number of probed entries per parameter (picked
    with ``rng``) to keep large layers cheap.
    """
    for p in params:
        p.grad = None
    backward(loss_fn())
    analytic, numeric = [], []
    for p in params:
        grad = p.grad if p.grad is not None else np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        picks = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            picks = (rng or np.random.default_rng(0)).choice(flat.size, size=max_entries, replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn().value)
            flat[i] = orig - h
            fm = float(loss_fn().value)
            flat[i] = orig
            analytic.append(grad.reshape(-1)[i])
            numeric.append((fp - fm) / (2 * h))
        p.grad = None
    analytic, numeric = np.array(analytic), np.array(numeric)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + eps)
    finite = err[np.isfinite(err)]
    return GradCheckResult(float(finite.max()) if finite.size else 0.0, int(np.sum(~np.isfinite(err))),
                           analytic, numeric)


# ---------------------------------------------------------------- modules and checkpoints

class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterable[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{k}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.value = np.array(state[name], dtype=p.value.dtype)


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> tuple[Path, Path]:
    """Write ``<path>.bin`` (raw little-endian float64) and ``<path>.manifest``."""
    path = Path(path)
    bin_path = path.with_name(path.name + ".bin")
    manifest_path = path.with_name(path.name + ".manifest")
    offset = 0
    lines = []
    with open(bin_path, "wb") as fh:
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(data.tobytes())
            shape = "x".join(str(s) for s in data.shape) or "scalar"
            lines.append(f"{name}\t{shape}\t{offset}")
            offset += data.nbytes
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return bin_path, manifest_path


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    raw = path.with_name(path.name + ".bin").read_bytes()
    out = {}
    for line in path.with_name(path.name + ".manifest").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        name, shape_text, offset = line.split("\t")
        shape = () if shape_text == "scalar" else tuple(int(s) for s in shape_text.split("x"))
        count = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=int(offset)).reshape(shape).copy()
    return out
