"""Reverse-mode differentiation over dense numpy tensors.

Operations executed while a :class:`Tape` is active, and touching at least
one tensor that requires a gradient, append a node holding the op name, its
inputs and a vector-Jacobian product closure. :func:`backward` walks that
list once in reverse insertion order. Without an active tape ops are plain
numpy evaluations, which is how inference runs.

A tape belongs to the thread that entered it; tapes on different threads
are independent.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.ndimage import correlate1d

from neureg.errors import InvalidInputError, ShapeMismatchError

ArrayLike = Union["Tensor", np.ndarray, float, int]
Vjp = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

GELU_C = float(np.sqrt(2.0 / np.pi))

_local = threading.local()


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class Node:
    """One recorded operation."""

    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    vjp: Vjp


@dataclass
class Tape:
    """Append-only record of operations; insertion order is topological."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _stack().pop()

    def append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1


def _stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional[Tape]:
    """Return the innermost tape entered on this thread, if any."""
    stack = _stack()
    return stack[-1] if stack else None


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """Dense float64 array with an optional gradient and tape handle."""

    __array_priority__ = 1000

    def __init__(
        self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None
    ) -> None:
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id: Optional[int] = None
        self.tape: Optional[Tape] = None

    @classmethod
    def parameter(cls, data: np.ndarray, name: Optional[str] = None) -> "Tensor":
        """A trainable leaf owning a private writable copy of ``data``."""
        return cls(np.array(data, dtype=np.float64), requires_grad=True, name=name)

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar -------------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: object) -> "Tensor":
        return slice_(self, index)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes: int) -> "Tensor":
        return permute(self, axes)

    def sum(self, axis: Optional[int | tuple[int, ...]] = None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis: Optional[int | tuple[int, ...]] = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def as_tensor(x: ArrayLike) -> Tensor:
    """Wrap arrays and scalars as constant tensors; pass tensors through."""
    return x if isinstance(x, Tensor) else Tensor(x)


def record(op: str, value: np.ndarray, inputs: Sequence[Tensor], vjp: Vjp) -> Tensor:
    """Create the output tensor of an op and register it on the active tape.

    Other modules use this to add ops with hand-written adjoints.

    Args:
        op: Name used in error messages and tape dumps.
        value: Forward result.
        inputs: Tensors the result depends on, in the order ``vjp`` answers.
        vjp: Maps the upstream gradient to one gradient (or None) per input.
    """
    out = Tensor(value)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        out.node_id = tape.append(Node(op, tuple(inputs), out, vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return record(
        "div",
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return record("neg", -a.data, (a,), lambda g: (-g,))


def scalar_mul(a: ArrayLike, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return record("scalar_mul", a.data * s, (a,), lambda g: (g * s,))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return record("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


# ---------------------------------------------------------------------------
# Linear algebra and shape manipulation
# ---------------------------------------------------------------------------


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatchError(f"matmul: batch shapes {a.shape} and {b.shape} differ") from None

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record("matmul", a.data @ b.data, (a, b), vjp)


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeMismatchError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def permute(a: ArrayLike, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatchError(f"permute: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return record("permute", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        shapes = [p.shape for p in parts]
        raise ShapeMismatchError(f"concat: shapes {shapes} differ off axis {axis}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return record("concat", out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_(a: ArrayLike, index: object) -> Tensor:
    """Basic (slice/int/step) indexing."""
    a = as_tensor(a)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        ga = np.zeros_like(a.data)
        ga[index] += g
        return (ga,)

    return record("slice", a.data[index], (a,), vjp)


def cyclic_shift(a: ArrayLike, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    """Roll along ``axes``; the adjoint rolls by the negated offsets."""
    a = as_tensor(a)
    shifts, axes = tuple(int(s) for s in shifts), tuple(axes)
    back = tuple(-s for s in shifts)
    return record(
        "cyclic_shift",
        np.roll(a.data, shifts, axis=axes),
        (a,),
        lambda g: (np.roll(g, back, axis=axes),),
    )


def pad(a: ArrayLike, pad_width: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; the adjoint crops."""
    a = as_tensor(a)
    widths = [tuple(p) for p in pad_width]
    if len(widths) != a.ndim:
        raise ShapeMismatchError(f"pad: {len(widths)} widths for {a.ndim} axes")
    if all(p == (0, 0) for p in widths):
        return a
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return record("pad", np.pad(a.data, widths), (a,), lambda g: (g[crop],))


def take(a: ArrayLike, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather entries along ``axis``; repeated indices accumulate in the adjoint."""
    a = as_tensor(a)
    indices = np.asarray(indices)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, axis, 0)
        np.add.at(moved, indices.reshape(-1), np.moveaxis(g, axis, 0).reshape((-1,) + moved.shape[1:]))
        return (ga,)

    if axis != 0:
        raise InvalidInputError("take: only axis 0 is supported")
    return record("take", np.take(a.data, indices, axis=axis), (a,), vjp)


def linear(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is (in, out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeMismatchError(f"linear: input {x.shape} and weight {weight.shape} are incompatible")
    inputs: list[Tensor] = [x, weight]
    out = x.data @ weight.data
    b = None
    if bias is not None:
        b = as_tensor(bias)
        if b.shape != (weight.shape[1],):
            raise ShapeMismatchError(f"linear: bias {b.shape} does not match weight {weight.shape}")
        out = out + b.data
        inputs.append(b)

    def vjp(g: np.ndarray) -> list[np.ndarray]:
        flat_g = g.reshape(-1, weight.shape[1])
        grads = [
            g @ weight.data.T,
            x.data.reshape(-1, weight.shape[0]).T @ flat_g,
        ]
        if b is not None:
            grads.append(flat_g.sum(axis=0))
        return grads

    return record("linear", out, inputs, vjp)


# ---------------------------------------------------------------------------
# Normalization and activations
# ---------------------------------------------------------------------------


def layer_norm(x: ArrayLike, gamma: ArrayLike, beta: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by gamma and shift by beta."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatchError(f"layer_norm: affine {gamma.shape}/{beta.shape} vs channels {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        gxhat = g * gamma.data
        gx = inv_std * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record("layer_norm", xhat * gamma.data + beta.data, (x, gamma, beta), vjp)


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    """Softmax; ``-inf`` logits receive exactly zero weight."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return record(
        "softmax",
        y,
        (x,),
        lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),),
    )


def gelu(x: ArrayLike) -> Tensor:
    """GELU, tanh approximation, with its exact derivative."""
    x = as_tensor(x)
    u = GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)
    du = GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
    dydx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
    return record("gelu", out, (x,), lambda g: (g * dydx,))


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _normalize_axes(axis: Optional[int | tuple[int, ...]], ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def sum_(a: ArrayLike, axis: Optional[int | tuple[int, ...]] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record("sum", out, (a,), vjp)


def mean(a: ArrayLike, axis: Optional[int | tuple[int, ...]] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return record("mean", out, (a,), vjp)


# ---------------------------------------------------------------------------
# Spatial ops used by the losses and the encoder head
# ---------------------------------------------------------------------------


def _box_sum_array(x: np.ndarray, window: int) -> np.ndarray:
    ones = np.ones(window)
    for axis in range(x.ndim):
        x = correlate1d(x, ones, axis=axis, mode="constant", cval=0.0)
    return x


def box_sum(a: ArrayLike, window: int) -> Tensor:
    """Sum over a centered odd cubic window, zero outside the grid.

    The operator is symmetric, so it is its own adjoint.
    """
    a = as_tensor(a)
    if window < 1 or window % 2 == 0:
        raise InvalidInputError(f"box_sum: window must be odd, got {window}")
    return record(
        "box_sum",
        _box_sum_array(a.data, window),
        (a,),
        lambda g: (_box_sum_array(g, window),),
    )


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear-interpolation weights (n_out, n_in), end points aligned."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] += 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def _apply_axis_matrices(x: np.ndarray, mats: Sequence[np.ndarray], axes: Sequence[int]) -> np.ndarray:
    for m, axis in zip(mats, axes):
        x = np.moveaxis(np.tensordot(m, x, axes=([1], [axis])), 0, axis)
    return x


def resize_linear(a: ArrayLike, out_shape: Sequence[int], axes: Sequence[int]) -> Tensor:
    """Separable (tri)linear resize of ``axes`` to ``out_shape``."""
    a = as_tensor(a)
    axes = tuple(axes)
    if len(out_shape) != len(axes):
        raise ShapeMismatchError(f"resize_linear: {len(out_shape)} sizes for axes {axes}")
    mats = [interpolation_matrix(a.shape[ax], n) for ax, n in zip(axes, out_shape)]
    out = _apply_axis_matrices(a.data, mats, axes)
    return record(
        "resize_linear",
        out,
        (a,),
        lambda g: (_apply_axis_matrices(g, [m.T for m in mats], axes),),
    )


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every recorded leaf.

    Repeated calls without resetting ``.grad`` add to the stored gradients.
    Leaves that take part in the tape but do not influence ``loss`` receive
    an exact zero gradient.
    """
    if loss.size != 1:
        raise InvalidInputError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.tape is None or loss.node_id is None:
        raise InvalidInputError("backward: loss was not recorded on a tape")
    tape = loss.tape
    last = loss.node_id

    for node in tape.nodes[: last + 1]:
        for t in node.inputs:
            if t.requires_grad and t.node_id is None and t.grad is None:
                t.grad = np.zeros_like(t.data)

    pending: dict[int, np.ndarray] = {last: np.ones_like(loss.data)}
    for idx in range(last, -1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ShapeMismatchError(
                    f"backward: {node.op} produced grad {gi.shape} for input {t.shape}"
                )
            if t.node_id is not None and t.tape is tape:
                prev = pending.get(t.node_id)
                pending[t.node_id] = gi if prev is None else prev + gi
            else:
                t.grad = gi.copy() if t.grad is None else t.grad + gi


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic and central-difference gradients."""

    max_rel_error: float
    tol: float
    n_checked: int
    worst: Optional[tuple[str, int]] = None
    failures: list[tuple[str, int, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    n_samples: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare backward() against central finite differences.

    Args:
        f: Deterministic closure returning a scalar tensor built from ``params``.
        params: Leaves to perturb.
        step: Finite-difference step.
        tol: Largest acceptable relative error.
        n_samples: Check this many randomly chosen entries instead of all.
        seed: Seed for the sample selection.
        floor: Lower bound on the relative-error denominator, so entries
            whose true gradient is ~0 are judged on absolute error.

    Returns:
        A GradCheckReport; failing entries are listed, nothing is raised.
    """
    for p in params:
        p.grad = None
        if not p.data.flags.writeable:
            p.data = p.data.copy()
    with Tape():
        loss = f()
        backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    if n_samples is None or n_samples >= total:
        flat = np.arange(total)
    else:
        flat = np.sort(np.random.default_rng(seed).choice(total, size=n_samples, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    report = GradCheckReport(max_rel_error=0.0, tol=tol, n_checked=len(flat))
    for k in flat:
        pi = int(np.searchsorted(offsets, k, side="right") - 1)
        j = int(k - offsets[pi])
        p = params[pi]
        orig = p.data.flat[j]
        p.data.flat[j] = orig + step
        f_plus = f().item()
        p.data.flat[j] = orig - step
        f_minus = f().item()
        p.data.flat[j] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = float(analytic[pi].flat[j])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        label = p.name or f"param{pi}"
        if err > tol:
            report.failures.append((label, j, a, numeric))
        if err > report.max_rel_error or report.worst is None:
            report.max_rel_error = max(report.max_rel_error, err)
            report.worst = (label, j)
    for p, g in zip(params, analytic):
        p.grad = g
    logging.debug(
        f"grad_check: {report.n_checked} entries, max rel error {report.max_rel_error:.3e}"
    )
    return report
