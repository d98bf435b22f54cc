"""Dense tensors with a reverse-mode tape.

Every differentiable op creates a new :class:`Tensor` whose ``_backward``
closure pushes the output gradient into its parents. The tape is implicit in
the parent links and is rebuilt on every forward pass; :meth:`Tensor.backward`
walks it in reverse topological order.

Arrays are ``float64`` unless a ``float32`` array is passed in explicitly
(the single precision path exists for latency benchmarks only).
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

from .errors import ConfigError, ContractError, DomainError, ShapeError

__all__ = [
    "Tensor",
    "GradCheckReport",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "matmul",
    "softmax",
    "log_softmax",
    "gelu",
    "relu",
    "tanh",
    "clamp_min",
    "layer_norm",
    "conv1d_same",
    "embedding",
    "concat",
    "dropout",
    "grad_check",
]

# per-thread so a teacher forward on a worker thread never disables taping elsewhere
_STATE = threading.local()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (current thread only)."""
    prev = is_grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


def is_grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float32:
        return arr
    return arr.astype(np.float64, copy=False)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A numpy array plus an optional gradient buffer and tape links."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._op = _op
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- tape ---------------------------------------------------------------
    @staticmethod
    def _make(data, parents: Sequence["Tensor"], op: str, backward) -> "Tensor":
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        if not track:
            return Tensor(data, _op=op)
        out = Tensor(data, requires_grad=True, _parents=tuple(parents), _op=op)
        out._backward = backward
        return out

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tracked leaf."""
        if grad is None:
            if self.size != 1:
                raise ContractError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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
        grads: dict[int, np.ndarray] = {id(self): _as_array(grad, self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- elementwise arithmetic ------------------------------------------
    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        other = self._lift(other)
        a, b = self, other

        def bw(g):
            ga = _unbroadcast(g, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._make(a.data + b.data, (a, b), "add", bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        a, b = self, other

        def bw(g):
            ga = _unbroadcast(g, a.shape) if a.requires_grad else None
            gb = _unbroadcast(-g, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._make(a.data - b.data, (a, b), "sub", bw)

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self, other

        def bw(g):
            ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._make(a.data * b.data, (a, b), "mul", bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        a, b = self, other

        def bw(g):
            ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._make(a.data / b.data, (a, b), "div", bw)

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), "neg", lambda g: (-g,))

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        a = self
        p = float(exponent)

        def bw(g):
            return (g * p * a.data ** (p - 1.0),)

        return Tensor._make(a.data**p, (a,), f"pow{p:g}", bw)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(self._lift(other), self)

    def exp(self):
        out_data = np.exp(self.data)
        return Tensor._make(out_data, (self,), "exp", lambda g: (g * out_data,))

    def log(self):
        a = self
        return Tensor._make(np.log(a.data), (a,), "log", lambda g: (g / a.data,))

    def sqrt(self):
        out_data = np.sqrt(self.data)
        return Tensor._make(out_data, (self,), "sqrt", lambda g: (g * 0.5 / out_data,))

    # -- reductions and shape ops -----------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", bw)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = int(np.prod([self.shape[i] for i in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), "transpose", lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, index):
        a = self

        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(a.data[index], (a,), "getitem", bw)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Build a leaf tensor from any array-like."""
    return Tensor(_as_array(data, dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# differentiable ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), "matmul", bw)


def _check_finite(x: Tensor, op: str):
    if not np.all(np.isfinite(x.data)):
        raise DomainError(f"{op}: input contains non-finite values")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    _check_finite(x, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), "softmax", bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(y, (x,), "log_softmax", bw)


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact gelu, x * Phi(x)."""
    cdf = special.ndtr(x.data)
    out = x.data * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return Tensor._make(out.astype(x.dtype, copy=False), (x,), "gelu", bw)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return Tensor._make(out, (x,), "relu", lambda g: (g * (x.data > 0),))


def clamp_min(x: Tensor, lo: float) -> Tensor:
    """``max(x, lo)``; the gradient is zero where the floor is active."""
    keep = x.data > lo
    return Tensor._make(np.where(keep, x.data, lo).astype(x.dtype), (x,), "clamp_min", lambda g: (g * keep,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._make(y, (x,), "tanh", lambda g: (g * (1.0 - y * y),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: trailing dim {n} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = ggam = gbet = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            ggam = (g * xhat).reshape(-1, n).sum(axis=0)
        if beta.requires_grad:
            gbet = g.reshape(-1, n).sum(axis=0)
        return gx, ggam, gbet

    return Tensor._make(out, (x, gamma, beta), "layer_norm", bw)


def conv1d_same(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Width-3 convolution along the sequence axis with one zero pad per side.

    ``x`` is ``[..., T, c_in]``, ``kernel`` is ``[3, c_in, c_out]``; tap 0
    reads position ``t-1``, tap 1 position ``t`` and tap 2 position ``t+1``.
    """
    if kernel.ndim != 3 or kernel.shape[0] != 3:
        raise ConfigError(f"conv1d_same: kernel width must be 3, got kernel shape {kernel.shape}")
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ShapeError(f"conv1d_same: input needs shape [..., T>=1, c_in], got {x.shape}")
    _, c_in, c_out = kernel.shape
    if x.shape[-1] != c_in or bias.shape != (c_out,):
        raise ShapeError(f"conv1d_same: input {x.shape}, kernel {kernel.shape}, bias {bias.shape} disagree")
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (0, 0)]
    xp = np.pad(x.data, pad)
    T = x.shape[-2]
    cols = np.concatenate([xp[..., 0:T, :], xp[..., 1 : T + 1, :], xp[..., 2 : T + 2, :]], axis=-1)
    w = kernel.data.reshape(3 * c_in, c_out)
    out = cols @ w + bias.data

    def bw(g):
        gx = gk = gb = None
        if x.requires_grad:
            gcols = g @ w.T
            gxp = np.zeros_like(xp)
            gxp[..., 0:T, :] += gcols[..., :c_in]
            gxp[..., 1 : T + 1, :] += gcols[..., c_in : 2 * c_in]
            gxp[..., 2 : T + 2, :] += gcols[..., 2 * c_in :]
            gx = gxp[..., 1 : T + 1, :]
        if kernel.requires_grad:
            gk = (cols.reshape(-1, 3 * c_in).T @ g.reshape(-1, c_out)).reshape(kernel.shape)
        if bias.requires_grad:
            gb = g.reshape(-1, c_out).sum(axis=0)
        return gx, gk, gb

    return Tensor._make(out, (x, kernel, bias), "conv1d_same", bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise DomainError("embedding: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DomainError(f"embedding: ids outside [0, {table.shape[0]})")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return Tensor._make(table.data[ids], (table,), "embedding", bw)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = list(parts)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([p.data for p in parts], axis=axis), parts, "concat", bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or no generator is given."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * Tensor(keep)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass(frozen=True)
class GradCheckReport:
    op: str
    max_rel_error: float
    tolerance: float
    passed: bool

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.op}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:.1e})"


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Iterable[Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    name: str = "op",
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn(*inputs)`` with central differences.

    The relative error per entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    ``max_entries`` caps how many entries of each input are probed (chosen at
    random with ``seed``); ``None`` probes every entry.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise ContractError("grad_check: inputs must be float64")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    if not isinstance(out, Tensor) or out.size != 1:
        shape = getattr(out, "shape", type(out).__name__)
        raise ContractError(f"grad_check: closure must return a scalar tensor, got {shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                fp = float(fn(*inputs).data)
                flat[i] = orig - step
                fm = float(fn(*inputs).data)
                flat[i] = orig
                num = (fp - fm) / (2.0 * step)
                ana = float(a.reshape(-1)[i])
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, err)
    return GradCheckReport(name, worst, tolerance, worst <= tolerance)
