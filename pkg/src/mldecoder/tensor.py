"""Dense float64 tensors with tape-based reverse-mode gradients.

Operations record themselves on the innermost active :class:`Tape`. Outside a
tape nothing is recorded, which is how inference runs. Contractions report
multiply-accumulate counts to any active :class:`OpCounter`.

Matrix products go through ``np.einsum`` rather than BLAS. BLAS kernels pick
different blocking for different row counts, so permuting the rows of an operand
can change results in the last bit; einsum computes every output row with the
same reduction order, which keeps permutation properties exact.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_state = threading.local()


def _stack(name):
    stack = getattr(_state, name, None)
    if stack is None:
        stack = []
        setattr(_state, name, stack)
    return stack


class Tensor:
    """N-dimensional float64 array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "__weakref__")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, other)
        return mul(self, as_tensor(other))

    __rmul__ = __mul__


class Parameter(Tensor):
    """A named leaf tensor that receives gradients."""

    __slots__ = ("name",)

    def __init__(self, data, name):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def check_unique_names(params: Iterable[Parameter]):
    seen = set()
    for p in params:
        if p.name in seen:
            raise ContractError(f"duplicate parameter name {p.name!r}")
        seen.add(p.name)


# ---------------------------------------------------------------------------
# tape and counters


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward: Callable


class Tape:
    """Records differentiable operations for one forward pass.

    >>> with Tape() as tape:
    ...     loss = f(params)
    >>> tape.backward(loss)
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        _stack("tapes").append(self)
        return self

    def __exit__(self, *exc):
        _stack("tapes").pop()
        return False

    def backward(self, loss: Tensor):
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {loss.shape}")
        if loss.requires_grad and not loss.is_leaf and not any(
                rec.out is loss for rec in self.records):
            raise ContractError("output was recorded on a different tape")
        grads = {id(loss): np.ones_like(loss.data)}
        if loss.is_leaf and loss.requires_grad:
            _accumulate(loss, grads[id(loss)])
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    _accumulate(inp, gi)
                else:
                    key = id(inp)
                    grads[key] = grads[key] + gi if key in grads else gi
        self.records.clear()


def _accumulate(t: Tensor, g):
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


class OpCounter:
    """Counts multiply-accumulates and logical float64 allocation.

    ``macs`` grows inside contraction ops; ``alloc_bytes`` sums the sizes of all
    op outputs produced while the counter is active.
    """

    def __init__(self):
        self.macs = 0
        self.alloc_bytes = 0

    def __enter__(self):
        _stack("counters").append(self)
        return self

    def __exit__(self, *exc):
        _stack("counters").pop()
        return False


def count_macs():
    return OpCounter()


def _count(macs):
    for c in _stack("counters"):
        c.macs += int(macs)


def make_op(data, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as an op output and record ``backward`` if needed.

    ``backward`` receives the output gradient and returns one gradient (or
    None) per input, each already shaped like that input.
    """
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.is_leaf = False
    counters = _stack("counters")
    for c in counters:
        c.alloc_bytes += out.data.size * 8
    tapes = _stack("tapes")
    out.requires_grad = bool(tapes) and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tapes[-1].records.append(_Record(out, tuple(inputs), backward))
    return out


# ---------------------------------------------------------------------------
# shape helpers


def _leading_broadcast(s1, s2, opname):
    """Result shape when the shorter shape is a suffix of the longer one."""
    long_, short = (s1, s2) if len(s1) >= len(s2) else (s2, s1)
    if tuple(long_[len(long_) - len(short):]) != tuple(short):
        raise DimensionError(f"{opname}: cannot broadcast {tuple(s1)} with {tuple(s2)}")
    return tuple(long_)


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _mm(a, b):
    # einsum's reduction order follows operand strides, so fix the layout
    return np.einsum("...ik,...kj->...ij", np.ascontiguousarray(a), np.ascontiguousarray(b))


# ---------------------------------------------------------------------------
# differentiable ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    lead = _leading_broadcast(a.shape[:-2], b.shape[:-2], "matmul")
    m, k = a.shape[-2:]
    n = b.shape[-1]
    _count(math.prod(lead) * m * k * n)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(_mm(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(_mm(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return make_op(_mm(ad, bd), (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise DimensionError(f"transpose needs >= 2 axes, got shape {x.shape}")
    return make_op(np.swapaxes(x.data, -1, -2).copy(), (x,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def add(a: Tensor, b: Tensor) -> Tensor:
    _leading_broadcast(a.shape, b.shape, "add")
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with leading-axis broadcasting."""
    _leading_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_op(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return make_op(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def softmax(x: Tensor, axis=-1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps=1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({d},) for input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return make_op(xhat * gd + bias.data, (x, gain, bias), backward)


def concat(tensors: Sequence[Tensor], axis=0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of zero tensors")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(
                f"concat along axis {axis}: shapes {[t.shape for t in tensors]} disagree")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return make_op(out.copy(), (x,), lambda g: (g.reshape(old),))


def take(x: Tensor, index, axis=0) -> Tensor:
    """Gather slices of ``x`` along ``axis``; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.intp)
    ax = axis % x.ndim
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        np.add.at(np.moveaxis(gx, ax, 0), index, np.moveaxis(g, ax, 0))
        return (gx,)

    return make_op(np.take(x.data, index, axis=ax), (x,), backward)


def group_matvec(G: Tensor, W: Tensor, n: int) -> Tensor:
    """First ``n`` entries of the flattened ``W_k @ G_k`` grid.

    ``G`` is ``(..., K, D)`` and ``W`` is ``(K, g, D)``, or one shared ``(g, D)``
    matrix. Entry ``k * g + j`` is row ``j`` of group ``k``. Groups past the
    last class are skipped and the short last group only computes its real
    rows, so the cost is exactly ``n * D`` multiply-accumulates per leading
    index.
    """
    shared = W.ndim == 2
    if W.ndim not in (2, 3) or G.ndim < 2 or G.shape[-1] != W.shape[-1] or (
            not shared and W.shape[0] != G.shape[-2]):
        raise DimensionError(f"group matvec: queries {G.shape} vs weight {W.shape}")
    g, D = W.shape[-2:]
    if not 0 <= n <= G.shape[-2] * g:
        raise DimensionError(f"{n} outputs do not fit {G.shape[-2]} groups of {g}")
    full, r = divmod(n, g)
    lead = G.shape[:-2]
    _count(math.prod(lead) * n * D)
    w = np.ascontiguousarray(W.data)
    x = np.ascontiguousarray(G.data)
    w_full = w if shared else w[:full]
    w_tail = (w if shared else w[full])[:r] if r else None
    # stacked matmul runs the same BLAS call per group as a plain loop would
    parts = [np.matmul(w_full, x[..., :full, :, None])[..., 0].reshape(*lead, full * g)]
    if r:
        parts.append(np.matmul(w_tail, x[..., full, :, None])[..., 0])
    out = np.concatenate(parts, axis=-1)

    def backward(gout):
        gG = gW = None
        g_full = gout[..., :full * g].reshape(*lead, full, g)
        g_tail = gout[..., full * g:]
        if G.requires_grad:
            gG = np.zeros(G.shape)
            gG[..., :full, :] = np.einsum("...kj,...kjd->...kd", g_full,
                                          np.broadcast_to(w_full, (full, g, D)))
            if r:
                gG[..., full, :] = g_tail @ w_tail
        if W.requires_grad:
            gW = np.zeros(W.shape)
            gk = np.einsum("bkj,bkd->kjd", g_full.reshape(-1, full, g),
                           x[..., :full, :].reshape(-1, full, D))
            gt = g_tail.reshape(-1, r).T @ x[..., full, :].reshape(-1, D) if r else None
            if shared:
                gW += gk.sum(axis=0)
                if r:
                    gW[:r] += gt
            else:
                gW[:full] = gk
                if r:
                    gW[full, :r] = gt
        return gG, gW

    return make_op(out, (G, W), backward)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_parameter: dict = field(default_factory=dict)
    worst: tuple | None = None
    tol: float = 1e-4

    @property
    def passed(self):
        return self.max_rel_error < self.tol


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Parameter], h=1e-5, tol=1e-4):
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` takes no arguments and closes over ``params``. Relative error per
    entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if h <= 0:
        raise ContractError("finite difference step must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        out = f()
        if out.size != 1:
            raise ContractError(f"gradient check needs a scalar function, got shape {out.shape}")
        tape.backward(out)
    report = GradCheckReport(0.0, tol=tol)
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        worst = 0.0
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = f().item()
            flat[idx] = orig - h
            fm = f().item()
            flat[idx] = orig
            num = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[idx]
            rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
            if rel > worst:
                worst = rel
            if rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst = (p.name, idx, a, num)
        report.per_parameter[p.name] = worst
        p.grad = None
    return report
