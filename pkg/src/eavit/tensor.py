"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure computing the vector-Jacobian product.  Calling
:func:`backward` on a scalar loss walks the recorded :class:`Graph` in reverse
topological order and accumulates ``.grad`` on every tensor that requires it.

Leading batch axes are supported wherever the model needs them; weights of
lower rank are broadcast and their gradients summed back to shape.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

L1_EPS = 1e-12
LN_EPS = 1e-5

_GRAD_ENABLED = True

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class GraphError(RuntimeError):
    """Raised on misuse of the recorded graph (non-scalar loss, reuse)."""


@dataclass(eq=False)
class _Node:
    op: str
    parents: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    consumed: bool = False


class Tensor:
    """An n-dimensional real array taking part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul_scalar(_as_tensor(other, self.dtype), -1.0))

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


@contextmanager
def no_grad() -> Iterator[None]:
    """Skip graph recording inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad or p._node is not None for p in parents):
        out.requires_grad = True
        out._node = _Node(op, parents, backward)
    return out


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} invalid for tensor of rank {x.ndim}")
    return axis % x.ndim


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape)
        gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape)
        return ga, gb

    return _make(A @ B, "matmul", (a, b), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"invalid permutation {axes} for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), "transpose", (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ValueError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _make(out, "reshape", (x,), lambda g: (g.reshape(src),))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _make(out, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    A, B = a.data, b.data
    try:
        out = A * B
    except ValueError as exc:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}") from exc
    return _make(out, "mul", (a, b), lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _make(x.data * c, "mul_scalar", (x,), lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    X = x.data
    cdf = 0.5 * (1.0 + erf(X / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * X * X)

    def backward(g):
        return (g * (cdf + X * pdf)).astype(X.dtype, copy=False),

    return _make((X * cdf).astype(X.dtype, copy=False), "gelu", (x,), backward)


def step(x: Tensor) -> Tensor:
    """Heaviside step with a zero derivative; only useful as a diagnostic."""
    return _make((x.data > 0).astype(x.dtype), "step", (x,), lambda g: (np.zeros_like(g),))


def sum_all(x: Tensor) -> Tensor:
    src = x.shape
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), "sum", (x,),
                 lambda g: (np.broadcast_to(g, src).copy(),))


def mean_all(x: Tensor) -> Tensor:
    src, n = x.shape, x.data.size
    return _make(np.asarray(x.data.mean(), dtype=x.dtype), "mean", (x,),
                 lambda g: (np.broadcast_to(g / n, src).copy(),))


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------


def concat_last_axis(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ValueError("concat of an empty sequence")
    lead = xs[0].shape[:-1]
    for t in xs:
        if t.shape[:-1] != lead:
            raise ValueError(f"concat shape mismatch: {[t.shape for t in xs]}")
    widths = np.cumsum([t.shape[-1] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=-1)
    return _make(out, "concat", tuple(xs), lambda g: tuple(np.split(g, widths, axis=-1)))


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of the last axis (one attention head)."""
    if not 0 <= start < stop <= x.shape[-1]:
        raise ValueError(f"slice [{start}:{stop}] out of range for width {x.shape[-1]}")
    src = x.shape

    def backward(g):
        full = np.zeros(src, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _make(x.data[..., start:stop], "slice_last", (x,), backward)


def slice_tokens(x: Tensor, index: int) -> Tensor:
    """Select token ``index`` from the second-to-last axis, dropping that axis."""
    if x.ndim < 2 or not -x.shape[-2] <= index < x.shape[-2]:
        raise ValueError(f"token {index} out of range for shape {x.shape}")
    src = x.shape

    def backward(g):
        full = np.zeros(src, dtype=g.dtype)
        full[..., index, :] = g
        return (full,)

    return _make(x.data[..., index, :], "slice_tokens", (x,), backward)


def prepend_token(token: Tensor, x: Tensor) -> Tensor:
    """Stack a single ``[D]``-shaped token in front of ``x[..., N, D]``."""
    if token.shape[-1] != x.shape[-1]:
        raise ValueError(f"token width {token.shape[-1]} != {x.shape[-1]}")
    tok = np.broadcast_to(token.data.reshape((1,) * (x.ndim - 1) + (-1,)), x.shape[:-2] + (1, x.shape[-1]))
    out = np.concatenate([tok, x.data], axis=-2)
    tshape = token.shape

    def backward(g):
        return g[..., 0, :].reshape(-1, tshape[-1]).sum(axis=0).reshape(tshape), g[..., 1:, :]

    return _make(out, "prepend_token", (token, x), backward)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def softmax_axis(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, "softmax", (x,), backward)


def l1_normalize_axis(x: Tensor, axis: int = -1, eps: float = L1_EPS) -> Tensor:
    """Divide each slice by its sum.

    Computed as ``(x + eps/n) / (sum + eps)`` so slices always sum to one and
    an all-zero slice becomes uniform ``1/n`` instead of NaN.
    """
    axis = _check_axis(x, axis)
    n = x.shape[axis]
    denom = x.data.sum(axis=axis, keepdims=True) + eps
    y = (x.data + eps / n) / denom

    def backward(g):
        return ((g - (g * y).sum(axis=axis, keepdims=True)) / denom,)

    return _make(y, "l1_normalize", (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Standardise over the last axis, then apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm expects gain/bias of shape ({d},), got {gain.shape}, {bias.shape}")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    G = gain.data

    def backward(g):
        gxhat = g * G
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _make(xhat * G + bias.data, "layer_norm", (x, gain, bias), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch.

    ``logits`` may be ``[C]`` with an integer label or ``[B, C]`` with ``B`` labels.
    """
    L = logits.data
    single = L.ndim == 1
    L2 = L[None, :] if single else L
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if L2.ndim != 2 or lab.shape != (L2.shape[0],):
        raise ValueError(f"cross_entropy shape mismatch: logits {L.shape}, labels {lab.shape}")
    classes = L2.shape[1]
    if lab.min() < 0 or lab.max() >= classes:
        raise ValueError(f"label out of range [0, {classes})")
    shifted = L2 - L2.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(L2.shape[0])
    loss = -logp[rows, lab].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, lab] -= 1.0
        grad *= g / L2.shape[0]
        return (grad[0] if single else grad,)

    return _make(np.asarray(loss, dtype=L.dtype), "cross_entropy", (logits,), backward)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


@dataclass
class Graph:
    """Operations reachable from a loss, producers before consumers."""

    order: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for p in t._node.parents:
                    if id(p) not in seen:
                        stack.append((p, False))
        return cls(order)

    @property
    def ops(self) -> list[str]:
        return [t._node.op for t in self.order if t._node is not None]


def backward(loss: Tensor) -> Graph:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf requiring grad.

    The graph is consumed: intermediate closures are released and a second
    call on the same loss raises :class:`GraphError`.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise GraphError("loss is not attached to a recorded graph")
    if loss._node.consumed:
        raise GraphError("graph already consumed by a previous backward call")

    graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(graph.order):
        g = grads.pop(id(t), None)
        node = t._node
        if node is None:
            if t.requires_grad and g is not None:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        if node.consumed:
            raise GraphError("graph already consumed by a previous backward call")
        if g is not None:
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not (parent.requires_grad or parent._node is not None):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        node.consumed = True
        node.backward = _spent
    return graph


def _spent(g):
    raise GraphError("graph already consumed by a previous backward call")


def _central_differences(f: Callable[[], Tensor], x: Tensor, h: float) -> np.ndarray:
    numeric = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    out = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f().data)
        flat[i] = orig - h
        fm = float(f().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return numeric


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, floor: float = 1e-8) -> float:
    """Largest relative error between backward and central differences.

    Each coordinate is compared as ``|a - n| / max(|a|, |n|, floor)``.  Never
    raises on a bad match: a non-differentiable ``f`` just reports a large
    error.  ``x.data`` is restored afterwards.
    """
    x.grad = None
    x.requires_grad = True
    backward(f(x))
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.astype(np.float64)
    x.grad = None
    numeric = _central_differences(lambda: f(x), x, h)
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((diff / denom).max()) if diff.size else 0.0


def check_gradients(loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor], h: float = 1e-4,
                    floor: float = 1e-6) -> dict[str, float]:
    """Per-tensor relative error ``max|a - n| / max(max|a|, max|n|, floor)``.

    ``floor`` keeps parameters whose true gradient is zero from turning
    finite-difference rounding noise into a huge ratio.
    """
    for t in tensors.values():
        t.grad = None
    backward(loss_fn())
    errors = {}
    for name, t in tensors.items():
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        numeric = _central_differences(loss_fn, t, h)
        scale = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
        errors[name] = float(np.abs(analytic - numeric).max() / scale)
    return errors
