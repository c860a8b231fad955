"""Small dense-tensor library with a reverse-mode autodiff tape.

Every model in the package is built from the operations here.  Tensors wrap a
numpy array; operations record their parents and a backward closure, and
:func:`backward` walks the resulting graph in reverse topological order.

Only the broadcasting the models need is supported: elementwise ops require
equal shapes, except that a 1-D right operand matching the last axis is treated
as a bias and broadcast over rows.
"""
from __future__ import annotations

import struct
import threading
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DimensionError",
    "NonFiniteError",
    "UsageError",
    "GradCheckError",
    "Tensor",
    "ParamStore",
    "constant",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "linear",
    "transpose",
    "reshape",
    "concat",
    "rows",
    "gather",
    "softmax",
    "layer_norm",
    "gelu",
    "tensor_sum",
    "mean",
    "mse",
    "backward",
    "no_grad",
    "grad_check",
    "save_params",
    "load_params",
]

LN_EPS = 1e-5
INIT_STD = 0.02


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class UsageError(RuntimeError):
    """The tape was used out of order."""


class GradCheckError(AssertionError):
    """Analytic and numerical gradients disagree beyond tolerance."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self._backward = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


_mode = threading.local()


@contextmanager
def no_grad():
    """Run operations without recording them on the tape."""
    prev = getattr(_mode, "off", False)
    _mode.off = True
    try:
        yield
    finally:
        _mode.off = prev


def _node(data, parents, backward_fn, op):
    _check_finite(data, op)
    if getattr(_mode, "off", False) or not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, True, tuple(parents), backward_fn)


_sink = threading.local()


def _accum(t, g):
    if not t.requires_grad:
        return
    grads = _sink.grads
    key = id(t)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = np.array(g, dtype=t.data.dtype, copy=True)


def constant(x, dtype=None):
    """Wrap ``x`` as a tensor that does not require gradients."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(_check_finite(arr, "constant"))


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return constant(x, like.data.dtype)


def _is_bias(a, b):
    return b.data.ndim == 1 and a.data.ndim >= 1 and b.shape[0] == a.shape[-1] and a.data.ndim > 1


def add(a, b):
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    if a.shape == b.shape:
        def bw(g):
            _accum(a, g)
            _accum(b, g)
    elif _is_bias(a, b):
        def bw(g):
            _accum(a, g)
            _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0))
    else:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not match")
    out = _node(a.data + b.data, (a, b), None, "add")
    if out.requires_grad:
        out._backward = bw
    return out


def sub(a, b):
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not match")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    out = _node(a.data - b.data, (a, b), None, "sub")
    if out.requires_grad:
        out._backward = bw
    return out


def mul(a, b):
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not match")

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    out = _node(a.data * b.data, (a, b), None, "mul")
    if out.requires_grad:
        out._backward = bw
    return out


def scale(a, s):
    s = float(s)

    def bw(g):
        _accum(a, g * s)

    out = _node(a.data * a.data.dtype.type(s), (a,), None, "scale")
    if out.requires_grad:
        out._backward = bw
    return out


def matmul(a, b):
    """Matrix product of 2-D operands, or batched product over equal leading axes."""
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul: operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    out = _node(a.data @ b.data, (a, b), None, "matmul")
    if out.requires_grad:
        out._backward = bw
    return out


def linear(x, W, b=None):
    """``x @ W + b`` with the bias broadcast over rows."""
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {W.shape[0]}")
    y = matmul(x, W)
    return add(y, b) if b is not None else y


def transpose(a, axes=None):
    axes = tuple(reversed(range(a.data.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(a, np.transpose(g, inv))

    out = _node(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), None, "transpose")
    if out.requires_grad:
        out._backward = bw
    return out


def reshape(a, shape):
    old = a.shape

    def bw(g):
        _accum(a, g.reshape(old))

    out = _node(a.data.reshape(shape), (a,), None, "reshape")
    if out.requires_grad:
        out._backward = bw
    return out


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: empty input")
    ref = tensors[0]
    tensors = [_lift(t, ref) for t in tensors]
    ax = axis % ref.data.ndim
    for t in tensors:
        if t.data.ndim != ref.data.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.data.ndim) if i != ax
        ):
            raise DimensionError(f"concat: incompatible shapes {ref.shape} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    out = _node(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), None, "concat")
    if out.requires_grad:
        out._backward = bw
    return out


def rows(a, start, stop):
    """Rows ``start:stop`` along the first axis."""
    if not 0 <= start <= stop <= a.shape[0]:
        raise DimensionError(f"rows: slice {start}:{stop} out of range for {a.shape}")

    def bw(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        _accum(a, full)

    out = _node(a.data[start:stop].copy(), (a,), None, "rows")
    if out.requires_grad:
        out._backward = bw
    return out


def gather(table, idx):
    """Rows ``table[idx]``; gradients scatter-add back into the table."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= table.shape[0])):
        raise DimensionError(f"gather: bad indices for table of {table.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        _accum(table, full)

    out = _node(table.data[idx].copy(), (table,), None, "gather")
    if out.requires_grad:
        out._backward = bw
    return out


def _softmax_np(x, axis):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(a, axis=-1):
    """Numerically stable softmax; the max along ``axis`` is subtracted first."""
    a = a if isinstance(a, Tensor) else constant(a)
    y = _softmax_np(a.data, axis)

    def bw(g):
        _accum(a, y * (g - np.sum(g * y, axis=axis, keepdims=True)))

    out = _node(y, (a,), None, "softmax")
    if out.requires_grad:
        out._backward = bw
    return out


def layer_norm(x, gain=None, bias=None, eps=LN_EPS):
    """Normalise each row over the last axis, then apply ``gain`` and ``bias``.

    Passing ``gain=None`` and ``bias=None`` returns the pre-affine output.
    """
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = xd.shape[-1]
    g_arr = gain.data if gain is not None else None
    y = xhat * g_arr if gain is not None else xhat
    if bias is not None:
        y = y + bias.data

    def bw(g):
        lead = g.reshape(-1, d)
        if gain is not None:
            _accum(gain, (lead * xhat.reshape(-1, d)).sum(axis=0))
        if bias is not None:
            _accum(bias, lead.sum(axis=0))
        if x.requires_grad:
            gh = g * g_arr if gain is not None else g
            dx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            _accum(x, dx)

    parents = tuple(t for t in (x, gain, bias) if t is not None)
    out = _node(y, parents, None, "layer_norm")
    if out.requires_grad:
        out._backward = bw
    return out


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        _accum(a, g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * dinner))

    out = _node(y, (a,), None, "gelu")
    if out.requires_grad:
        out._backward = bw
    return out


def tensor_sum(a):
    def bw(g):
        _accum(a, np.full_like(a.data, g))

    out = _node(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), None, "sum")
    if out.requires_grad:
        out._backward = bw
    return out


def mean(a):
    return scale(tensor_sum(a), 1.0 / a.data.size)


def mse(pred, target):
    target = _lift(target, pred)
    diff = sub(pred, target)
    return mean(mul(diff, diff))


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise UsageError("backward expects a scalar tensor")
    if loss._backward is None:
        raise UsageError("backward called on a tensor with no recorded forward computation")
    order = _topo(loss)
    _sink.grads = {id(loss): np.ones_like(loss.data)}
    try:
        for node in reversed(order):
            g = _sink.grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
            else:
                node._backward(g)
    finally:
        _sink.grads = None


class ParamStore:
    """Named, ordered collection of trainable tensors.

    Iteration order is insertion order, so two stores built from the same
    config and seed have the same flat index.
    """

    def __init__(self, dtype=np.float64, seed=0):
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self._params = OrderedDict()

    def __len__(self):
        return len(self._params)

    def __iter__(self):
        return iter(self._params.items())

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=self.dtype)
        t = Tensor(arr, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def normal(self, name, shape, std=INIT_STD):
        return self.add(name, self.rng.normal(0.0, std, size=shape))

    def zeros(self, name, shape):
        return self.add(name, np.zeros(shape))

    def ones(self, name, shape):
        return self.add(name, np.ones(shape))

    @property
    def size(self):
        return sum(t.data.size for t in self._params.values())

    def offsets(self):
        out, pos = {}, 0
        for name, t in self._params.items():
            out[name] = (pos, pos + t.data.size)
            pos += t.data.size
        return out

    def locate(self, flat_index):
        """Map a flat scalar index to ``(name, index into that tensor)``."""
        for name, (lo, hi) in self.offsets().items():
            if lo <= flat_index < hi:
                return name, np.unravel_index(flat_index - lo, self._params[name].shape)
        raise IndexError(flat_index)

    def flat(self):
        return np.concatenate([t.data.ravel() for t in self._params.values()]) if self._params \
            else np.zeros(0, dtype=self.dtype)

    def set_flat(self, vec):
        vec = np.asarray(vec)
        if vec.size != self.size:
            raise DimensionError(f"flat vector has {vec.size} entries, store has {self.size}")
        for name, (lo, hi) in self.offsets().items():
            t = self._params[name]
            t.data[...] = vec[lo:hi].reshape(t.shape)

    def flat_grad(self):
        return np.concatenate([
            (t.grad if t.grad is not None else np.zeros_like(t.data)).ravel()
            for t in self._params.values()
        ])

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def astype(self, dtype):
        out = ParamStore(dtype)
        out.rng = self.rng
        for name, t in self._params.items():
            out.add(name, t.data)
        return out

    def copy(self):
        return self.astype(self.dtype)

    def group(self, name):
        return name.split(".")[0]


# ---------------------------------------------------------------- serialization

_MAGIC = b"USTY"
_VERSION = 1


def save_params(store, path):
    """Write ``store`` as float32 little-endian records behind a small header."""
    buf = bytearray()
    buf += _MAGIC
    buf += struct.pack("<II", _VERSION, len(store))
    for name, t in store:
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", t.data.ndim)
        buf += struct.pack(f"<{t.data.ndim}I", *t.shape)
        buf += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_params(path, dtype=np.float32):
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a parameter file (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = 12
    store = ParamStore(dtype)
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims)
        pos += 4 * n
        store.add(name, arr)
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return store


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)
    worst: tuple = ("", 0.0)
    checked: int = 0

    def max_error(self):
        return max(self.errors.values(), default=0.0)

    def passed(self, tol):
        return self.max_error() < tol


def _rel_err(a, n, floor):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(loss_fn, store, tol=1e-4, h=1e-5, floor=1e-6, group_of=None, max_per_param=None,
               seed=0, analytic=None, raise_on_fail=True):
    """Compare analytic gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must rebuild the forward pass from ``store`` each time it is
    called.  The relative error of each scalar is ``|a - n| / max(|a|, |n|, floor)``;
    the report holds the maximum per parameter group (``group_of(name)``,
    default: every parameter its own group).

    ``analytic`` overrides the tape gradient with a flat vector, which is how
    the negative control injects a corrupted gradient.
    """
    if store.dtype != np.float64:
        raise UsageError("grad_check requires a 64-bit ParamStore")
    group_of = group_of or (lambda name: name)
    store.zero_grad()
    loss = loss_fn()
    backward(loss)
    a_flat = store.flat_grad() if analytic is None else np.asarray(analytic, dtype=np.float64)
    store.zero_grad()

    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    offsets = store.offsets()
    for name, t in store:
        lo, hi = offsets[name]
        idx = np.arange(t.data.size)
        if max_per_param is not None and idx.size > max_per_param:
            idx = np.sort(rng.choice(idx, size=max_per_param, replace=False))
        flat_view = t.data.reshape(-1)
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat_view[i]
            flat_view[i] = orig + h
            fp = float(loss_fn().data)
            flat_view[i] = orig - h
            fm = float(loss_fn().data)
            flat_view[i] = orig
            num[j] = (fp - fm) / (2 * h)
        err = float(np.max(_rel_err(a_flat[lo:hi][idx], num, floor))) if idx.size else 0.0
        g = group_of(name)
        report.errors[g] = max(report.errors.get(g, 0.0), err)
        if err > report.worst[1]:
            report.worst = (name, err)
        report.checked += idx.size
    if raise_on_fail and not report.passed(tol):
        raise GradCheckError(
            f"gradient check failed: worst parameter {report.worst[0]!r} "
            f"relative error {report.worst[1]:.3e} >= {tol:.1e}"
        )
    return report
