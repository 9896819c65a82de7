"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient. Elementwise operations accept either
identical shapes or a size-1 operand; every other alignment is spelled out
by a dedicated op (``add_row``, ``head_bias``).

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(mul(w, w))
    >>> tape.backward(loss)
    >>> w.grad
    array([2., 4.])
"""
from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ArgumentError, ContractError, NumericDomainError, ShapeError

_local = threading.local()


def _stack() -> list:
    st = getattr(_local, "tapes", None)
    if st is None:
        st = _local.tapes = []
    return st


def current_tape() -> "Tape | None":
    st = _stack()
    return st[-1] if st else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    A tape is confined to the thread that entered it.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._outputs: set[int] = set()

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        st = _stack()
        if st and st[-1] is self:
            st.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        self._nodes.append(_Node(out, inputs, backward))
        self._outputs.add(id(out))

    def gradients(self, loss: Tensor, wrt: Sequence[Tensor]) -> list:
        """Return d(loss)/d(t) for each ``t`` in ``wrt`` without touching ``.grad``.

        Entries are ``None`` when ``loss`` does not depend on the tensor.
        """
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise ArgumentError("backward needs a scalar loss tensor")
        if id(loss) not in self._outputs and not loss.requires_grad:
            raise ArgumentError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads.get(id(t)) for t in wrt]

    def backward(self, loss: Tensor, params: Sequence[Tensor] | None = None) -> None:
        """Accumulate gradients into ``.grad`` of leaf tensors.

        Leaves are all ``requires_grad`` inputs that no recorded node produced,
        unless an explicit ``params`` list is given.
        """
        if params is None:
            seen, params = set(), []
            for node in self._nodes:
                for t in node.inputs:
                    if t.requires_grad and id(t) not in self._outputs and id(t) not in seen:
                        seen.add(id(t))
                        params.append(t)
            if loss.requires_grad and id(loss) not in self._outputs:
                params.append(loss)
        for t, g in zip(params, self.gradients(loss, params)):
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g


def no_tape():
    """Context manager that suspends recording (evaluation mode)."""

    class _NoTape:
        def __enter__(self):
            self._saved = list(_stack())
            _stack().clear()

        def __exit__(self, *exc):
            _stack().extend(self._saved)
            return False

    return _NoTape()


# -- helpers ---------------------------------------------------------------

def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(out, inputs, backward)
    return out


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def _elementwise_pair(a, b, opname: str):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not match")
    return a, b


def _check_finite(x: np.ndarray, opname: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericDomainError(f"{opname}: non-finite value encountered")


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _elementwise_pair(a, b, "add")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _elementwise_pair(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _elementwise_pair(a, b, "mul")

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _result(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _result(x * cdf, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # two-branch form avoids overflow in exp for large |x|
    ex = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    _check_finite(y, "exp")
    return _result(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0) or not np.all(np.isfinite(a.data)):
        raise NumericDomainError("log: argument must be positive and finite")
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def smooth_l1(a) -> Tensor:
    """Elementwise Huber-style penalty with unit transition point."""
    a = as_tensor(a)
    x = a.data
    small = np.abs(x) < 1.0
    y = np.where(small, 0.5 * x * x, np.abs(x) - 0.5)
    return _result(y, (a,), lambda g: (g * np.where(small, x, np.sign(x)),))


def dropout(a, rate: float, key: Sequence[int] | None = None, training: bool = True) -> Tensor:
    """Inverted dropout driven by a counter-based generator keyed by ``key``.

    Identity when not training or when ``rate == 0``.
    """
    a = as_tensor(a)
    if not training or rate <= 0.0:
        return a
    if rate >= 1.0:
        raise ArgumentError("dropout rate must be < 1")
    if key is None:
        raise ArgumentError("training-mode dropout needs an explicit RNG key")
    state = np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in key]).generate_state(2, dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=(int(state[0]) << 64) | int(state[1])))
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _result(a.data * keep, (a,), lambda g: (g * keep,))


# -- structural ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _result(a.data @ b.data, (a, b), backward)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2) if a.ndim >= 2 else (0,)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return _result(data, (a,), lambda g: (g.reshape(src),))


def add_row(x, b) -> Tensor:
    """Add vector ``b`` to every row (last axis) of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_row: bias {b.shape} does not match last axis of {x.shape}")

    def backward(g):
        return g, g.reshape(-1, b.shape[0]).sum(axis=0)

    return _result(x.data + b.data, (x, b), backward)


def linear(x, w, b=None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add_row(out, b)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ArgumentError("concat of an empty list")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(data, tuple(ts), backward)


def take(a, index) -> Tensor:
    """Basic or integer-array indexing (``a[index]``)."""
    a = as_tensor(a)
    data = a.data[index]

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _result(np.array(data, dtype=np.float64), (a,), backward)


def head_bias(gamma, edges) -> Tensor:
    """Stack ``gamma[h] * edges`` into an ``[h, N, N]`` tensor."""
    gamma, edges = as_tensor(gamma), as_tensor(edges)
    if gamma.ndim != 1 or edges.ndim != 2:
        raise ShapeError(f"head_bias: expected [h] and [N,N], got {gamma.shape}, {edges.shape}")

    def backward(g):
        return (
            np.einsum("hij,ij->h", g, edges.data),
            np.einsum("hij,h->ij", g, gamma.data),
        )

    return _result(gamma.data[:, None, None] * edges.data[None], (gamma, edges), backward)


# -- reductions ------------------------------------------------------------

def sum_(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max_(a, axis: int = -1) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first arg-max."""
    a = as_tensor(a)
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _result(out, (a,), backward)


def row_normalize(a) -> Tensor:
    """Scale each row of a 2-D tensor to unit L2 norm; zero rows stay zero."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"row_normalize expects [N, d], got {a.shape}")
    norms = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    live = norms > 0
    safe = np.where(live, norms, 1.0)
    u = np.where(live, a.data / safe, 0.0)

    def backward(g):
        radial = (g * u).sum(axis=1, keepdims=True)
        return (np.where(live, (g - radial * u) / safe, 0.0),)

    return _result(u, (a,), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericDomainError("softmax: NaN in input")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _result(y, (x,), backward)


def logsumexp(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericDomainError("logsumexp: NaN in input")
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    y = e / s

    def backward(g):
        return (np.expand_dims(g, axis) * y,)

    return _result(out, (x,), backward)


def layernorm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return dx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _result(xhat * gain.data + bias.data, (x, gain, bias), backward)


def cosine_matrix(feats) -> Tensor:
    """Pairwise cosine similarity of rows; rows with zero norm give 0."""
    feats = as_tensor(feats)
    if feats.ndim != 2:
        raise ShapeError(f"cosine_matrix expects [N, d], got {feats.shape}")
    f = feats.data
    norms = np.sqrt((f * f).sum(axis=1))
    live = norms > 0
    safe = np.where(live, norms, 1.0)
    u = np.where(live[:, None], f / safe[:, None], 0.0)
    c = u @ u.T
    c = np.clip(0.5 * (c + c.T), -1.0, 1.0)
    np.fill_diagonal(c, np.where(live, 1.0, 0.0))

    def backward(g):
        g = g.copy()
        np.fill_diagonal(g, 0.0)
        du = (g + g.T) @ u
        radial = (du * u).sum(axis=1, keepdims=True)
        df = np.where(live[:, None], (du - radial * u) / safe[:, None], 0.0)
        return (df,)

    return _result(c, (feats,), backward)


# -- gradient checking -----------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: dict | Sequence[Tensor], step: float = 1e-5,
               tol: float = 1e-4, floor: float = 1e-6) -> dict:
    """Compare tape gradients of scalar ``f()`` against central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``. Returns
    ``{name: {"max_rel_err": float, "flagged": int, "size": int}}``.
    """
    if not isinstance(params, dict):
        params = {(p.name or f"p{i}"): p for i, p in enumerate(params)}
    with no_tape():
        first = float(f().data)
        second = float(f().data)
    if first != second:
        raise ContractError("grad_check: function is not deterministic")

    tensors = list(params.values())
    with Tape() as tape:
        loss = f()
    if loss.requires_grad:
        analytic = tape.gradients(loss, tensors)
    else:
        # loss does not depend on any parameter
        analytic = [None] * len(tensors)

    report = {}
    with no_tape():
        for (name, p), a in zip(params.items(), analytic):
            a = np.zeros_like(p.data) if a is None else a
            num = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = float(f().data)
                flat[i] = orig - step
                fm = float(f().data)
                flat[i] = orig
                num.reshape(-1)[i] = (fp - fm) / (2 * step)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
            rel = np.abs(a - num) / denom
            report[name] = {
                "max_rel_err": float(rel.max()) if rel.size else 0.0,
                "flagged": int((rel > tol).sum()),
                "size": int(p.size),
            }
    return report
