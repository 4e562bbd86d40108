"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Operations are recorded on the active :class:`Tape` whenever at least one
input requires a gradient.  ``backward(tape, loss)`` walks the record in
reverse and accumulates gradients into every leaf that asked for one.

    with Tape() as tape:
        loss = (w @ x).relu().sum()
    grads = backward(tape, loss)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "NonFiniteError",
    "TapeError",
    "as_tensor",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "relu",
    "sigmoid",
    "log",
    "exp",
    "absolute",
    "power",
    "maximum",
    "minimum",
    "clamp",
    "matmul",
    "softmax",
    "layer_norm",
    "interp_sample",
    "reduce",
    "concat",
    "stack",
    "reshape",
    "transpose",
    "take",
    "backward",
    "grad_check",
    "GradCheckReport",
]


class NonFiniteError(FloatingPointError):
    """A forward value or a gradient became NaN or infinite."""


class TapeError(RuntimeError):
    pass


_ACTIVE: list["Tape"] = []


def _active_tape() -> "Tape | None":
    return _ACTIVE[-1] if _ACTIVE else None


class Tensor:
    """Dense float64 array that may participate in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operators
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return _getitem(self, index)

    # method sugar
    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def abs(self):
        return absolute(self)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        """Swap the last two axes."""
        axes = list(range(self.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
        return transpose(self, tuple(axes))


class Parameter(Tensor):
    """A named trainable tensor with an accumulated gradient of the same shape."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def tensor(self) -> Tensor:
        return self

    @property
    def gradient(self) -> np.ndarray:
        return self.grad

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations plus a parameter registry.

    Use as a context manager; operations executed inside the block are
    recorded.  A tape can be differentiated once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: dict[str, Parameter] = {}
        self._leaves: dict[int, Tensor] = {}
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def _register_leaf(self, t: Tensor) -> None:
        if id(t) in self._leaves:
            return
        self._leaves[id(t)] = t
        if isinstance(t, Parameter):
            other = self.params.get(t.name)
            if other is not None and other is not t:
                raise TapeError(f"two distinct parameters share the name {t.name!r}")
            self.params[t.name] = t

    def record(self, op: str, inputs: tuple[Tensor, ...], out: Tensor, grad_fn) -> None:
        for t in inputs:
            if t.requires_grad and t._tape is None:
                self._register_leaf(t)
        out.requires_grad = True
        out._tape = self
        self.nodes.append(_Node(op, inputs, out, grad_fn))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    return arr


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(_check_finite(np.asarray(data, dtype=np.float64), op))
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, grad_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
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


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def grad_fn(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make("div", out, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _make("scale", a.data * s, (a,), lambda g: (g * s,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def logistic(x: np.ndarray) -> np.ndarray:
    """Elementwise 1 / (1 + exp(-x)), accurate to full relative precision in both tails."""
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = logistic(a.data)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def power(a, p: float) -> Tensor:
    """``a ** p`` for a constant exponent."""
    a = as_tensor(a)
    p = float(p)
    out = a.data**p

    def grad_fn(g):
        if p == 0.0:
            return (np.zeros_like(g),)
        base = a.data
        with np.errstate(divide="ignore"):
            slope = np.where(base == 0.0, 0.0 if p < 1.0 else float(p == 1.0), p * base ** (p - 1.0))
        return (g * slope,)

    return _make("power", out, (a,), grad_fn)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "maximum")
    pick_a = a.data >= b.data

    def grad_fn(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _make("maximum", np.where(pick_a, a.data, b.data), (a, b), grad_fn)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "minimum")
    pick_a = a.data <= b.data

    def grad_fn(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _make("minimum", np.where(pick_a, a.data, b.data), (a, b), grad_fn)


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = out == a.data
    return _make("clamp", out, (a,), lambda g: (g * inside,))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "neg": neg, "log": log, "exp": exp, "abs": absolute}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "maximum": maximum, "minimum": minimum}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name.  ``scale`` takes a float as ``b``."""
    if op == "scale":
        return scale(a, b)
    if op in _UNARY:
        if b is not None:
            raise TypeError(f"{op} is unary")
        return _UNARY[op](a)
    if op in _BINARY:
        if b is None:
            raise TypeError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", a.data @ b.data, (a, b), grad_fn)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax: axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (x,), grad_fn)


def layer_norm(x, axis: int, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize ``x`` to zero mean / unit variance along ``axis``, then apply
    ``gain`` and ``bias`` (broadcast against ``x``)."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[axis]
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = gain.data * xhat + bias.data

    def grad_fn(g):
        dxhat = g * gain.data
        dx = (
            inv_std
            / n
            * (
                n * dxhat
                - dxhat.sum(axis=axis, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axis, keepdims=True)
            )
        )
        return dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _make("layer_norm", out, (x, gain, bias), grad_fn)


def interp_sample(x, positions) -> Tensor:
    """Sample ``x[..., C, T]`` at fractional time ``positions[..., Q]``.

    Linear interpolation between the neighbouring integer steps; the time
    axis is zero-padded, so samples that fall outside ``[0, T-1]`` fade to
    zero.  Returns ``[..., C, Q]``.  Differentiable in both arguments.
    """
    x, positions = as_tensor(x), as_tensor(positions)
    t_len = x.shape[-1]
    p = positions.data
    lo = np.floor(p)
    frac = p - lo
    steps = np.arange(t_len, dtype=np.float64)[:, None]
    # one-hot selectors of shape [..., T, Q]; out-of-range indices match nothing
    at_lo = (steps == lo[..., None, :]).astype(np.float64)
    at_hi = (steps == (lo + 1.0)[..., None, :]).astype(np.float64)
    weights = at_lo * (1.0 - frac)[..., None, :] + at_hi * frac[..., None, :]

    def grad_fn(g):
        gx = _unbroadcast(g @ np.swapaxes(weights, -1, -2), x.shape)
        slope = x.data @ (at_hi - at_lo)
        gp = _unbroadcast((g * slope).sum(axis=-2), positions.shape)
        return gx, gp

    return _make("interp_sample", x.data @ weights, (x, positions), grad_fn)


# ---------------------------------------------------------------- reductions & shape


def _norm_axis(axis, ndim: int, op: str):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"{op}: axis {ax} out of range for {ndim}-d tensor")
    return tuple(ax % ndim for ax in axes)


def reduce(op: str, x, axis=None, keepdims: bool = False) -> Tensor:
    """``sum``, ``mean`` or ``max`` over ``axis`` (all axes when None).

    The max gradient goes to the first maximal element only.
    """
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim, op)
    kept_shape = tuple(1 if (axes is None or i in axes) else n for i, n in enumerate(x.shape))

    if op == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)

        def grad_fn(g):
            return (np.broadcast_to(g.reshape(kept_shape), x.shape).copy(),)

    elif op == "mean":
        count = x.data.size // max(1, int(np.prod(kept_shape)))
        out = x.data.mean(axis=axes, keepdims=keepdims)

        def grad_fn(g):
            return (np.broadcast_to(g.reshape(kept_shape) / count, x.shape).copy(),)

    elif op == "max":
        if axes is None:
            flat = int(np.argmax(x.data))
            out = x.data.reshape(-1)[flat]
            if keepdims:
                out = out.reshape(kept_shape)

            def grad_fn(g):
                gx = np.zeros(x.size)
                gx[flat] = g.reshape(-1)[0]
                return (gx.reshape(x.shape),)

        else:
            if len(axes) != 1:
                raise ValueError("max: reduce over a single axis or all axes")
            ax = axes[0]
            idx = np.expand_dims(np.argmax(x.data, axis=ax), ax)
            out = np.take_along_axis(x.data, idx, axis=ax)
            if not keepdims:
                out = np.squeeze(out, axis=ax)

            def grad_fn(g):
                gx = np.zeros_like(x.data)
                np.put_along_axis(gx, idx, g.reshape(idx.shape), axis=ax)
                return (gx,)

    else:
        raise ValueError(f"unknown reduction {op!r}")
    return _make(op, np.asarray(out), (x,), grad_fn)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as err:
        raise ValueError(f"concat: {err}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, ts, grad_fn)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.stack([t.data for t in ts], axis=axis)

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make("stack", out, ts, grad_fn)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _make("transpose", out, (x,), lambda g: (np.transpose(g, inverse),))


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather ``indices`` along ``axis``; repeated indices accumulate."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(x.data, idx, axis=axis)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _make("take", out, (x,), grad_fn)


def _getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in parts)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _make("getitem", np.array(out, dtype=np.float64), (x,), grad_fn)


# ---------------------------------------------------------------- backward


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Differentiate scalar ``loss`` through ``tape``.

    Gradients are added into ``.grad`` of every leaf that requires one.
    Returns the gradient contributed by this tape for each registered
    parameter, keyed by name.
    """
    if tape.consumed:
        raise TapeError("backward already ran on this tape; re-run the forward pass")
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is not tape:
        raise TapeError("loss was not produced on this tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.grad_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if not np.all(np.isfinite(gi)):
                raise NonFiniteError(f"non-finite gradient flowing out of {node.op}")
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    result: dict[str, np.ndarray] = {}
    for key, leaf in tape._leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        if isinstance(leaf, Parameter):
            result[leaf.name] = g
    tape.nodes.clear()
    return result


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_abs_err: float
    max_rel_err: float
    worst_index: tuple[int, ...] | None
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAILED"
        return (
            f"grad_check {status}: max_abs={self.max_abs_err:.3e} "
            f"max_rel={self.max_rel_err:.3e} worst={self.worst_index}"
        )


def _relative_errors(analytic: np.ndarray, numeric: np.ndarray, atol: float) -> np.ndarray:
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
    rel = diff / denom
    # differences at or below the absolute floor count as agreement
    return np.where(diff <= atol, 0.0, rel)


def _report(analytic: np.ndarray, numeric: np.ndarray, tol: float, atol: float) -> GradCheckReport:
    if analytic.size == 0:
        return GradCheckReport(0.0, 0.0, None, True, analytic, numeric)
    abs_err = np.abs(analytic - numeric)
    rel_err = _relative_errors(analytic, numeric, atol)
    key = rel_err if rel_err.max() > 0 else abs_err
    worst = tuple(int(i) for i in np.unravel_index(int(np.argmax(key)), analytic.shape))
    max_rel = float(rel_err.max())
    return GradCheckReport(float(abs_err.max()), max_rel, worst, max_rel < tol, analytic, numeric)


def grad_check(
    f: Callable[[Tensor], Tensor],
    x0,
    h: float = 1e-6,
    tol: float = 1e-4,
    atol: float = 1e-8,
    analytic: Callable[[np.ndarray], np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x0`` with central differences.

    ``analytic`` overrides the tape gradient, which lets a harness test feed
    in a known-bad gradient.
    """
    x0 = np.array(x0, dtype=np.float64)
    if analytic is None:
        x = Parameter("x", x0.copy())
        with Tape() as tape:
            y = f(x)
        backward(tape, y)
        grad = x.grad
    else:
        grad = np.asarray(analytic(x0.copy()), dtype=np.float64)

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        num_flat[i] = (fp - fm) / (2.0 * h)

    return _report(grad, numeric, tol, atol)


def parameters_grad_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Parameter] | dict[str, Parameter],
    h: float = 1e-6,
    tol: float = 1e-4,
    atol: float = 1e-8,
) -> dict[str, GradCheckReport]:
    """Finite-difference check of ``loss_fn`` against every coordinate of ``params``.

    ``loss_fn`` must rebuild the loss from the current parameter values.
    """
    params = list(params.values() if isinstance(params, dict) else params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    backward(tape, loss)
    reports = {}
    for p in params:
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)
        reports[p.name] = _report(p.grad.copy(), numeric, tol, atol)
    return reports
