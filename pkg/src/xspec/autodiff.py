"""Dense float64 tensors with a define-by-run reverse-mode tape.

Operations record onto the innermost active :class:`Tape` only when at least
one input requires a gradient. Outside a tape every op is a plain numpy
computation, which is what evaluation uses.

    with Tape() as tape:
        loss = (w * w).sum()
    backward(loss)
    w.grad  # == 2 * w.data
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import ContractError, DomainError, GradcheckError, NumericalError, ShapeError

_local = threading.local()


def _stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


@dataclass
class Record:
    inputs: tuple
    output: "Tensor"
    backward: Callable
    op: str


class Tape:
    """Ordered log of differentiable operations for one forward pass.

    A tape belongs to the thread that entered it. Node ids are indices into
    :attr:`records`, so every input of record ``k`` was produced by a record
    with a smaller index or is a leaf.
    """

    def __init__(self):
        self.records: list[Record] = []
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def record(self, out, inputs, backward_fn, op):
        for t in inputs:
            if t.requires_grad and t._tape is not self:
                self._leaves.setdefault(id(t), t)
        out.node = len(self.records)
        out._tape = self
        self.records.append(Record(tuple(inputs), out, backward_fn, op))

    @property
    def leaves(self):
        return list(self._leaves.values())

    def __len__(self):
        return len(self.records)


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.node = None
        self._tape = None

    @classmethod
    def _wrap(cls, data):
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t.name = None
        t.node = None
        t._tape = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

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


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _finite(data, op):
    # the sum test is cheap and only falls back to the full check on overflow
    if not np.isfinite(data.sum()) and not np.isfinite(data).all():
        raise NumericalError(f"{op} produced non-finite values")


def _result(data, inputs, backward_fn, op):
    data = np.asarray(data, dtype=np.float64)
    _finite(data, op)
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn, op)
    return out


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _result(out, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _result(out, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), bw, "mul")


def scale(a, c):
    a = as_tensor(a)
    c = float(c)

    def bw(g):
        return (g * c,)

    return _result(a.data * c, (a,), bw, "scale")


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):   # overflow is reported by the finiteness check
        out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _result(out, (a,), bw, "exp")


def log(a):
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise DomainError("log of a non-positive value")

    def bw(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), bw, "log")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _result(np.where(mask, a.data, 0.0), (a,), bw, "relu")


def clamp_min(a, lo):
    a = as_tensor(a)
    lo = float(lo)
    mask = a.data > lo

    def bw(g):
        return (g * mask,)

    return _result(np.where(mask, a.data, lo), (a,), bw, "clamp_min")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


def gelu(a):
    """Exact GELU, ``x * Phi(x)``."""
    a = as_tensor(a)
    x = a.data

    def bw(g):
        return (g * _gelu_grad(x),)

    return _result(0.5 * x * (1.0 + erf(x * _INV_SQRT2)), (a,), bw, "gelu")


def power(x, p):
    """``x ** p`` for a float or scalar-tensor exponent.

    A tensor exponent is differentiated too, which needs a strictly
    positive base.
    """
    x = as_tensor(x)
    p_t = p if isinstance(p, Tensor) else None
    if p_t is not None:
        if p_t.size != 1:
            raise ShapeError(f"power: exponent must be scalar, got shape {p_t.shape}")
        pv = float(p_t.data.reshape(-1)[0])
    else:
        pv = float(p)
    xd = x.data
    if not pv.is_integer() and (xd < 0).any():
        raise DomainError(f"power: negative base with fractional exponent {pv}")
    if p_t is not None and p_t.requires_grad and (xd <= 0).any():
        raise DomainError("power: learnable exponent needs a strictly positive base")
    with np.errstate(divide="ignore"):
        out = np.power(xd, pv)
    inputs = (x,) if p_t is None else (x, p_t)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            gx = g * pv * np.power(xd, pv - 1.0)
        gx = np.where(np.isfinite(gx), gx, 0.0)
        if p_t is None:
            return (gx,)
        with np.errstate(divide="ignore", invalid="ignore"):
            gp = np.sum(g * out * np.log(np.where(xd > 0, xd, 1.0)))
        return gx, np.full(p_t.shape, gp)

    return _result(out, inputs, bw, "power")


# ---------------------------------------------------------------------------
# linear algebra and shape
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _result(out, (a, b), bw, "matmul")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _result(np.transpose(a.data, axes), (a,), bw, "transpose")


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None

    def bw(g):
        return (g.reshape(a.shape),)

    return _result(out, (a,), bw, "reshape")


def expand(a, shape):
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape)

    def bw(g):
        return (unbroadcast(g, a.shape),)

    return _result(out, (a,), bw, "expand")


def _is_basic_key(key):
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, np.integer)) or k is None or k is Ellipsis for k in parts)


def getitem(a, key):
    a = as_tensor(a)
    out = a.data[key]
    basic = _is_basic_key(key)

    def bw(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[key] += g
        else:
            np.add.at(ga, key, g)
        return (ga,)

    return _result(np.array(out, dtype=np.float64), (a,), bw, "getitem")


def concat(tensors: Sequence, axis=0):
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(ts), bw, "concat")


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), bw, "sum")


def fsum(a):
    """Correctly rounded full sum (``math.fsum``); n equal terms give exactly round(n * term)."""
    a = as_tensor(a)
    out = np.asarray(math.fsum(a.data.ravel().tolist()))
    return _result(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "fsum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1) if a.data.size else 1.0

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(out, (a,), bw, "mean")


# ---------------------------------------------------------------------------
# fused numerics
# ---------------------------------------------------------------------------

def softmax(x, axis=-1):
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), bw, "softmax")


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), bw, "log_softmax")


def layernorm(x, gain, bias, eps=1e-6):
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    if eps <= 0:
        raise ContractError(f"layernorm: eps must be positive, got {eps}")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: gain {gain.shape} / bias {bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gain.data + bias.data, (x, gain, bias), bw, "layernorm")


def pairwise_dist(f):
    """Euclidean distance matrix between the rows of ``f``.

    The diagonal is exactly zero. Where a distance is zero the backward pass
    uses the zero subgradient instead of dividing by it.
    """
    f = as_tensor(f)
    if f.ndim != 2:
        raise ShapeError(f"pairwise_dist: expected a 2-D feature matrix, got {f.shape}")
    x = np.ascontiguousarray(f.data)
    d = np.sqrt(np.maximum(kernels.sqdist(x, x), 0.0))

    def bw(g):
        return (kernels.pdist_backward(x, d, np.ascontiguousarray(g)),)

    return _result(d, (f,), bw, "pairwise_dist")


# ---------------------------------------------------------------------------
# backward and gradient checking
# ---------------------------------------------------------------------------

def backward(loss: Tensor, leaves: Iterable[Tensor] = ()):
    """Populate ``.grad`` on every leaf of the tape that recorded ``loss``.

    Leaves that the loss does not reach (and any extra ``leaves`` passed in)
    get a zero gradient. Returns ``{id(leaf): grad}``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    leaves = list(leaves)
    if tape is None:
        if not loss.requires_grad:
            for leaf in leaves:
                leaf.grad = np.zeros_like(leaf.data)
            return {id(leaf): leaf.grad for leaf in leaves}
        raise ContractError("loss was not recorded on a tape")

    pending = {loss.node: np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    for nid in range(loss.node, -1, -1):
        g = pending.pop(nid, None)
        if g is None:
            continue
        rec = tape.records[nid]
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ShapeError(f"{rec.op}: backward produced {gi.shape} for input of shape {t.shape}")
            if t._tape is tape:
                prev = pending.get(t.node)
                pending[t.node] = gi if prev is None else prev + gi
            else:
                prev = leaf_grads.get(id(t))
                leaf_grads[id(t)] = gi if prev is None else prev + gi

    for leaf in tape.leaves + leaves:
        g = leaf_grads.get(id(leaf))
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=np.float64)
    return {id(leaf): leaf.grad for leaf in tape.leaves + leaves}


def relative_error(analytic, numeric, floor=1e-6):
    """Coordinatewise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps coordinates whose true gradient is essentially zero from
    dominating through finite-difference truncation noise.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@dataclass
class GradcheckReport:
    max_rel_err: float
    worst_index: tuple | None
    n_checked: int
    tol: float
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)

    @property
    def passed(self):
        return self.max_rel_err < self.tol


def _scalar(value, index):
    v = value.item() if isinstance(value, Tensor) else float(value)
    if not math.isfinite(v):
        raise GradcheckError("non-finite function value", index)
    return v


def _central_differences(fn, x, flat_indices, h):
    numeric = np.empty(len(flat_indices))
    flat = x.data.reshape(-1)
    for k, i in enumerate(flat_indices):
        orig = flat[i]
        idx = np.unravel_index(i, x.shape)
        try:
            flat[i] = orig + h
            fp = _scalar(fn(), idx)
            flat[i] = orig - h
            fm = _scalar(fn(), idx)
        except GradcheckError:
            raise
        except NumericalError as exc:
            raise GradcheckError(f"non-finite function value ({exc})", idx) from None
        finally:
            flat[i] = orig
        numeric[k] = (fp - fm) / (2.0 * h)
    return numeric


def _report(analytic, numeric, x_shape, flat_indices, tol, floor):
    if len(flat_indices) == 0:
        return GradcheckReport(0.0, None, 0, tol, analytic, numeric, np.asarray(flat_indices))
    err = relative_error(analytic, numeric, floor)
    k = int(np.argmax(err))
    return GradcheckReport(float(err[k]), tuple(int(v) for v in np.unravel_index(flat_indices[k], x_shape)),
                           len(flat_indices), tol, analytic, numeric, np.asarray(flat_indices))


def gradcheck(f, x: Tensor, h=1e-4, tol=1e-4, coords=None, floor=1e-6) -> GradcheckReport:
    """Compare the tape gradient of scalar ``f(x)`` with central differences.

    ``coords`` optionally restricts the check to these flat indices.
    """
    if h <= 0:
        raise ContractError(f"gradcheck: step h must be positive, got {h}")
    was = x.requires_grad
    x.requires_grad = True
    try:
        with Tape():
            y = f(x)
        if y.size != 1:
            raise ContractError(f"gradcheck: f must be scalar-valued, got shape {y.shape}")
        _scalar(y, None)
        backward(y, leaves=[x])
        grad = x.grad.reshape(-1).copy()
    finally:
        x.requires_grad = was
    flat_indices = np.arange(x.size) if coords is None else np.asarray(coords, dtype=np.int64)
    numeric = _central_differences(lambda: f(x), x, flat_indices, h)
    return _report(grad[flat_indices], numeric, x.shape, flat_indices, tol, floor)


def _allocate(sizes, budget):
    """Split ``budget`` coordinates over tensors of ``sizes``: even shares, spare capacity refilled."""
    take = [0] * len(sizes)
    left = budget
    open_ = [k for k, n in enumerate(sizes) if n > 0]
    while left > 0 and open_:
        share = max(1, left // len(open_))
        for k in list(open_):
            add = min(share, sizes[k] - take[k], left)
            take[k] += add
            left -= add
            if take[k] == sizes[k]:
                open_.remove(k)
            if left == 0:
                break
    return take


def gradcheck_params(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], h=1e-4, tol=1e-4,
                     max_coords=200, rng=None, floor=1e-6, groups=None) -> dict[str, GradcheckReport]:
    """Gradcheck the tensors in ``params`` against one backward pass.

    Without ``groups`` every tensor is its own group. ``groups`` maps a group
    name to a list of tensor names; its coordinate budget is spread evenly
    over those tensors. A group checks all of its coordinates, or a random
    subsample of ``max_coords`` of them when it is larger. The worst index of
    a multi-tensor group is ``(tensor name, index)``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    if groups is None:
        groups = {name: [name] for name in params}
    with Tape():
        loss = loss_fn()
    _scalar(loss, None)
    backward(loss, leaves=list(params.values()))
    reports = {}
    for gname, members in groups.items():
        sizes = [params[n].size for n in members]
        total = sum(sizes)
        take = sizes if max_coords is None or total <= max_coords else _allocate(sizes, max_coords)
        parts = []
        for name, n_take in zip(members, take):
            p = params[name]
            if n_take == p.size:
                flat_indices = np.arange(p.size)
            else:
                flat_indices = np.sort(rng.choice(p.size, size=n_take, replace=False))
            numeric = _central_differences(loss_fn, p, flat_indices, h)
            parts.append((name, _report(p.grad.reshape(-1)[flat_indices], numeric, p.shape, flat_indices, tol,
                                        floor)))
        if len(parts) == 1:
            reports[gname] = parts[0][1]
            continue
        worst_name, worst = max(parts, key=lambda nr: nr[1].max_rel_err)
        reports[gname] = GradcheckReport(
            worst.max_rel_err, (worst_name, worst.worst_index), sum(r.n_checked for _, r in parts), tol,
            np.concatenate([r.analytic for _, r in parts]), np.concatenate([r.numeric for _, r in parts]),
            np.concatenate([r.indices for _, r in parts]))
    return reports
