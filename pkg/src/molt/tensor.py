"""Dense float64 tensors with a small reverse-mode differentiation engine.

Every operation checks shapes explicitly and refuses to broadcast, with two
exceptions that keep model code readable:

* a Python scalar may be combined with any tensor, and
* ``matmul`` accepts a 2-D operand shared across the leading (batch)
  dimensions of the other operand, which is how weights are applied.

Anything else that needs repetition goes through :func:`expand`.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class DeterminismError(RuntimeError):
    """Raised when a loss function returns different values for identical inputs."""


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, _op: str = ""):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not _op:  # op results are checked in _node
            _check_finite(arr, "leaf construction")
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._op = _op

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(self, other)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: add(neg(self), other)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(self, other)
    __truediv__ = lambda self, other: div(self, other)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)

    @property
    def mT(self) -> "Tensor":
        return swap_last(self)


class Parameter(Tensor):
    """A named leaf tensor. Frozen parameters never receive gradients."""

    __slots__ = ("name", "frozen")

    def __init__(self, data, name: str, frozen: bool = False):
        super().__init__(data, requires_grad=not frozen)
        self.name = name
        self.frozen = frozen

    def __repr__(self) -> str:
        state = "frozen" if self.frozen else "trainable"
        return f"Parameter({self.name!r}, shape={self.shape}, {state})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return out


_grad_enabled = True


@contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _node(out: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    _check_finite(out, op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(out, requires_grad=True, _parents=parents, _backward=backward, _op=op)
    return Tensor(out, _op=op)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


# elementwise -----------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _node(a.data + c, (a,), lambda g: (g,), "add_scalar")
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _node(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    c = np.sqrt(2.0 / np.pi)
    x2 = x * x
    inner = c * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), backward, "gelu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _node(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _node(x * x, (a,), lambda g: (2.0 * g * x,), "square")


# structural ------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    if a.ndim != b.ndim and 2 not in (a.ndim, b.ndim):
        raise ShapeError(f"matmul: batch ranks differ for {a.shape} @ {b.shape}")
    if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        if ga.ndim > ad.ndim:
            ga = ga.reshape(-1, *ad.shape).sum(axis=0)
        if gb.ndim > bd.ndim:
            gb = gb.reshape(-1, *bd.shape).sum(axis=0)
        return ga, gb

    return _node(ad @ bd, (a, b), backward, "matmul")


def swap_last(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got {a.shape}")
    return _node(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "swap_last")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(old),), "reshape")


def expand(a: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``a`` ``n`` times along it."""
    if n < 1:
        raise ShapeError(f"expand count must be positive, got {n}")
    ax = axis if axis >= 0 else a.ndim + 1 + axis
    out = np.repeat(np.expand_dims(a.data, ax), n, axis=ax)
    return _node(out, (a,), lambda g: (g.sum(axis=ax),), "expand")


def expand_to(a: Tensor, leading: Sequence[int]) -> Tensor:
    """Repeat ``a`` over new leading dimensions, e.g. a bias over batch and tokens."""
    out = a
    for n in reversed(tuple(leading)):
        out = expand(out, 0, n)
    return out


def total(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(total(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0].shape
    ax = axis if axis >= 0 else len(ref) + axis
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {t.shape} do not conform")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _node(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([expand(t, axis, 1) for t in tensors], axis=axis)


def select(a: Tensor, index: int, axis: int = 0) -> Tensor:
    shape = a.shape
    ax = axis if axis >= 0 else a.ndim + axis

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        sl = [slice(None)] * len(shape)
        sl[ax] = index
        full[tuple(sl)] = g
        return (full,)

    return _node(np.take(a.data, index, axis=ax), (a,), backward, "select")


# normalisation ---------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), backward, "softmax")


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor."""
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {a.shape}")
    return softmax(a, axis=-1)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return _node(out, (a,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply per-feature gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(out, (x, gain, bias), backward, "layer_norm")


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale vectors along ``axis`` to unit norm; ``eps`` guards the denominator."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x / denom
    live = norm > eps

    def backward(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(live, (g - out * proj) / denom, g / denom),)

    return _node(out, (a,), backward, "l2_normalize")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over a batch of logit rows."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs {labels.shape[0]} labels")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = labels.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return _node(np.asarray(loss), (logits,), backward, "cross_entropy")


# differentiation -------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Parameter]) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every trainable parameter in ``params``.

    Parameters the loss does not depend on get all-zero gradients; frozen
    parameters are skipped entirely.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    params = [p for p in params if not p.frozen]
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo_order(loss)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
    out: dict[str, np.ndarray] = {}
    for p in params:
        if p.name in out:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        g = grads.get(id(p))
        out[p.name] = np.zeros_like(p.data) if g is None else np.asarray(g).reshape(p.shape)
    return out


@dataclass
class RelErrorReport:
    max_rel_error: float = 0.0
    per_param: dict[str, float] = field(default_factory=dict)
    n_checked: int = 0
    worst: tuple[str, tuple[int, ...]] | None = None

    @property
    def empty(self) -> bool:
        return self.n_checked == 0


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter], eps: float = 1e-5) -> RelErrorReport:
    """Compare ``backward`` against central finite differences, entry by entry.

    ``loss_fn`` is called with no arguments and must read the current values
    of ``params``; entries are perturbed in place and restored afterwards.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = [p for p in params if not p.frozen]
    report = RelErrorReport()
    if not params:
        return report
    first = loss_fn()
    if first.item() != loss_fn().item():
        raise DeterminismError("loss_fn returned different values on repeated evaluation")
    analytic = backward(first, params)
    for p in params:
        worst = 0.0
        flat = p.data.reshape(-1)
        ga = analytic[p.name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = ga[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst:
                worst = rel
            if rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst = (p.name, np.unravel_index(i, p.shape))
            report.n_checked += 1
        report.per_param[p.name] = worst
    return report
