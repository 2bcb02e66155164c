"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward closure on the output
node (define-by-run).  Calling :func:`backward` on a scalar loss walks the
recorded graph once in reverse topological order and accumulates
``d loss / d leaf`` into the ``grad`` of every leaf created with
``requires_grad=True``.  Nodes whose inputs are all constants record
nothing, so untracked math is free.

All data is float64.  Set the ``LOADCAST_NAN_TRAP`` environment variable
(or call :func:`set_nan_trap`) to make every op raise as soon as it
produces a non-finite value.
"""

from __future__ import annotations

import os
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

Array = np.ndarray

_nan_trap = os.environ.get("LOADCAST_NAN_TRAP", "") not in ("", "0")


def set_nan_trap(enabled: bool) -> None:
    """Enable or disable non-finite trapping on every op (overrides the env var)."""
    global _nan_trap
    _nan_trap = bool(enabled)


def _as_array(values) -> Array:
    return np.asarray(values, dtype=np.float64)


def unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accumulate(t: "Tensor", g: Array) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


class Tensor:
    """A dense float64 array plus optional gradient bookkeeping.

    ``data`` is the value, ``grad`` (same shape, or None) is filled by
    :func:`backward`.  ``requires_grad`` marks leaves whose gradient should
    be kept; it propagates automatically through ops.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple["Tensor", ...] = ()
        self._grad_fn: Callable[[Array], None] | None = None
        self._op = "leaf"

    @classmethod
    def _from_op(cls, data: Array, parents: Sequence["Tensor"],
                 grad_fn: Callable[[Array], None], op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._grad_fn = grad_fn
        else:
            out._parents = ()
            out._grad_fn = None
        out._op = op
        if _nan_trap and not np.isfinite(data).all():
            raise NumericError(f"non-finite value produced by op '{op}'")
        return out

    # -- basics ----------------------------------------------------------

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}{flag})"

    @staticmethod
    def _coerce(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = Tensor._coerce(other)
        out_data = self.data + other.data

        def grad_fn(g: Array) -> None:
            _accumulate(self, unbroadcast(g, self.data.shape))
            _accumulate(other, unbroadcast(g, other.data.shape))

        return Tensor._from_op(out_data, (self, other), grad_fn, "add")

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        def grad_fn(g: Array) -> None:
            _accumulate(self, -g)

        return Tensor._from_op(-self.data, (self,), grad_fn, "neg")

    def __sub__(self, other) -> "Tensor":
        other = Tensor._coerce(other)
        out_data = self.data - other.data

        def grad_fn(g: Array) -> None:
            _accumulate(self, unbroadcast(g, self.data.shape))
            _accumulate(other, unbroadcast(-g, other.data.shape))

        return Tensor._from_op(out_data, (self, other), grad_fn, "sub")

    def __rsub__(self, other) -> "Tensor":
        return Tensor._coerce(other).__sub__(self)

    def __mul__(self, other) -> "Tensor":
        other = Tensor._coerce(other)
        out_data = self.data * other.data

        def grad_fn(g: Array) -> None:
            _accumulate(self, unbroadcast(g * other.data, self.data.shape))
            _accumulate(other, unbroadcast(g * self.data, other.data.shape))

        return Tensor._from_op(out_data, (self, other), grad_fn, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = Tensor._coerce(other)
        out_data = self.data / other.data

        def grad_fn(g: Array) -> None:
            _accumulate(self, unbroadcast(g / other.data, self.data.shape))
            _accumulate(other, unbroadcast(-g * self.data / other.data ** 2,
                                           other.data.shape))

        return Tensor._from_op(out_data, (self, other), grad_fn, "div")

    def __rtruediv__(self, other) -> "Tensor":
        return Tensor._coerce(other).__truediv__(self)

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        p = float(exponent)
        out_data = self.data ** p

        def grad_fn(g: Array) -> None:
            _accumulate(self, g * p * self.data ** (p - 1.0))

        return Tensor._from_op(out_data, (self,), grad_fn, "pow")

    # -- matrix product ----------------------------------------------------

    def matmul(self, other) -> "Tensor":
        """Matrix product with numpy-style batch broadcasting on leading axes."""
        other = Tensor._coerce(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs >= 2-D operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
        out_data = a.data @ b.data

        def grad_fn(g: Array) -> None:
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2)
                _accumulate(a, unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ g
                _accumulate(b, unbroadcast(gb, b.data.shape))

        return Tensor._from_op(out_data, (a, b), grad_fn, "matmul")

    __matmul__ = matmul

    # -- shape manipulation -------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.data.shape
        out_data = self.data.reshape(shape)

        def grad_fn(g: Array) -> None:
            _accumulate(self, g.reshape(orig))

        return Tensor._from_op(out_data, (self,), grad_fn, "reshape")

    def transpose(self, axes: Sequence[int] | None = None) -> "Tensor":
        out_data = np.transpose(self.data, axes)
        inv = None if axes is None else tuple(np.argsort(axes))

        def grad_fn(g: Array) -> None:
            _accumulate(self, np.transpose(g, inv))

        return Tensor._from_op(out_data, (self,), grad_fn, "transpose")

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def swapaxes(self, axis1: int, axis2: int) -> "Tensor":
        out_data = np.swapaxes(self.data, axis1, axis2)

        def grad_fn(g: Array) -> None:
            _accumulate(self, np.swapaxes(g, axis1, axis2))

        return Tensor._from_op(out_data, (self,), grad_fn, "swapaxes")

    def expand(self, shape: Sequence[int]) -> "Tensor":
        shape = tuple(shape)
        out_data = np.broadcast_to(self.data, shape).copy()

        def grad_fn(g: Array) -> None:
            _accumulate(self, unbroadcast(g, self.data.shape))

        return Tensor._from_op(out_data, (self,), grad_fn, "expand")

    def __getitem__(self, index) -> "Tensor":
        # basic indexing only (ints, slices, tuples thereof)
        out_data = self.data[index]

        def grad_fn(g: Array) -> None:
            buf = np.zeros_like(self.data)
            buf[index] = g
            _accumulate(self, buf)

        return Tensor._from_op(out_data, (self,), grad_fn, "slice")

    @staticmethod
    def concat(tensors: Sequence["Tensor"], axis: int = 0) -> "Tensor":
        tensors = [Tensor._coerce(t) for t in tensors]
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def grad_fn(g: Array) -> None:
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

        return Tensor._from_op(out_data, tuple(tensors), grad_fn, "concat")

    @staticmethod
    def stack(tensors: Sequence["Tensor"], axis: int = 0) -> "Tensor":
        tensors = [Tensor._coerce(t) for t in tensors]
        out_data = np.stack([t.data for t in tensors], axis=axis)
        ax = axis % out_data.ndim

        def grad_fn(g: Array) -> None:
            for i, t in enumerate(tensors):
                idx = [slice(None)] * g.ndim
                idx[ax] = i
                _accumulate(t, g[tuple(idx)])

        return Tensor._from_op(out_data, tuple(tensors), grad_fn, "stack")

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        in_shape = self.data.shape

        def grad_fn(g: Array) -> None:
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            _accumulate(self, np.broadcast_to(gg, in_shape).copy())

        return Tensor._from_op(out_data, (self,), grad_fn, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.mean(axis=axis, keepdims=keepdims)
        in_shape = self.data.shape
        count = self.data.size // max(out_data.size, 1)

        def grad_fn(g: Array) -> None:
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            _accumulate(self, np.broadcast_to(gg, in_shape) / count)

        return Tensor._from_op(out_data, (self,), grad_fn, "mean")

    # -- elementwise nonlinearities --------------------------------------------

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def grad_fn(g: Array) -> None:
            _accumulate(self, g * out_data)

        return Tensor._from_op(out_data, (self,), grad_fn, "exp")

    def log(self) -> "Tensor":
        def grad_fn(g: Array) -> None:
            _accumulate(self, g / self.data)

        return Tensor._from_op(np.log(self.data), (self,), grad_fn, "log")

    def sin(self) -> "Tensor":
        def grad_fn(g: Array) -> None:
            _accumulate(self, g * np.cos(self.data))

        return Tensor._from_op(np.sin(self.data), (self,), grad_fn, "sin")

    def cos(self) -> "Tensor":
        def grad_fn(g: Array) -> None:
            _accumulate(self, -g * np.sin(self.data))

        return Tensor._from_op(np.cos(self.data), (self,), grad_fn, "cos")

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)

        def grad_fn(g: Array) -> None:
            _accumulate(self, g * (1.0 - out_data ** 2))

        return Tensor._from_op(out_data, (self,), grad_fn, "tanh")

    def sigmoid(self) -> "Tensor":
        # stable piecewise form, never overflows
        x = self.data
        out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                            np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

        def grad_fn(g: Array) -> None:
            _accumulate(self, g * out_data * (1.0 - out_data))

        return Tensor._from_op(out_data, (self,), grad_fn, "sigmoid")

    def relu(self) -> "Tensor":
        out_data = np.maximum(self.data, 0.0)

        def grad_fn(g: Array) -> None:
            _accumulate(self, g * (self.data > 0.0))

        return Tensor._from_op(out_data, (self,), grad_fn, "relu")

    def softmax(self, axis: int = -1) -> "Tensor":
        """Softmax along ``axis``, computed with max subtraction for stability."""
        if not -self.ndim <= axis < self.ndim:
            raise ShapeError(f"softmax axis {axis} invalid for shape {self.shape}")
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def grad_fn(g: Array) -> None:
            # d softmax: (g - <g, y>) * y along the softmax axis
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            _accumulate(self, (g - dot) * out_data)

        return Tensor._from_op(out_data, (self,), grad_fn, "softmax")


# -- module-level aliases matching the public op surface ------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return Tensor._coerce(a).matmul(b)


def relu(x: Tensor) -> Tensor:
    return Tensor._coerce(x).relu()


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Tensor._coerce(x).softmax(axis)


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Backpropagate from a scalar ``loss`` through the recorded graph.

    Visits every reachable node exactly once in reverse topological order
    and accumulates gradients into ``requires_grad`` leaves.  Unless
    ``retain_graph`` is set, the graph is released afterwards and
    intermediate gradients are dropped.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any requires_grad tensor")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._grad_fn is not None and node.grad is not None:
            node._grad_fn(node.grad)
        if node._parents:
            # keep gradients on leaves only; a retained graph must not
            # carry stale intermediate grads into the next backward pass
            node.grad = None
            if not retain_graph:
                node._parents = ()
                node._grad_fn = None


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               indices: Sequence[int] | None = None) -> float:
    """Compare the taped gradient of ``f`` at ``x`` against central differences.

    Returns ``max_i |g_ad_i - g_fd_i| / max(1, |g_fd_i|)`` over the checked
    elements (all of them unless ``indices`` selects a flat subset).
    ``f`` must be deterministic; this is verified by evaluating it twice.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-6, 1e-3]")
    probe = Tensor(x.data.copy(), requires_grad=True)
    first = f(probe)
    if first.data.size != 1:
        raise ShapeError("grad_check target must return a scalar")
    second = f(Tensor(x.data.copy(), requires_grad=True))
    if not np.array_equal(first.data, second.data):
        raise NumericError("f is not deterministic: repeated evaluation differs")
    backward(first)
    g_ad = np.zeros_like(probe.data) if probe.grad is None else probe.grad

    flat = probe.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        saved = flat[i]
        flat[i] = saved + h
        up = float(f(Tensor(probe.data.copy())).data)
        flat[i] = saved - h
        down = float(f(Tensor(probe.data.copy())).data)
        flat[i] = saved
        g_fd = (up - down) / (2.0 * h)
        err = abs(g_ad.reshape(-1)[i] - g_fd) / max(1.0, abs(g_fd))
        worst = max(worst, err)
    return worst


def grad_check_params(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
                      samples_per_param: int = 0, h: float = 1e-5,
                      rng: np.random.Generator | None = None) -> float:
    """Finite-difference check of ``loss_fn`` against the taped gradient of
    every tensor in ``params``.

    ``samples_per_param`` limits the number of randomly chosen elements
    checked per parameter (0 checks all of them).  Returns the worst
    relative error seen, with the same error metric as :func:`grad_check`.
    """
    loss = loss_fn()
    backward(loss)
    grads = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
             for name, p in params.items()}
    for p in params.values():
        p.zero_grad()

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if samples_per_param and samples_per_param < n:
            idx = rng.choice(n, size=samples_per_param, replace=False)
        else:
            idx = np.arange(n)
        for i in idx:
            saved = flat[i]
            flat[i] = saved + h
            up = float(loss_fn().data)
            flat[i] = saved - h
            down = float(loss_fn().data)
            flat[i] = saved
            g_fd = (up - down) / (2.0 * h)
            g_ad = grads[name].reshape(-1)[i]
            worst = max(worst, abs(g_ad - g_fd) / max(1.0, abs(g_fd)))
    return worst
