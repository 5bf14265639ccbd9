"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable value is a `Tensor` wrapping a numpy array.  Primitive
operations compute their result eagerly with numpy and, when a `Tape` is
active and any input requires a gradient, append a node to that tape.  A node
stores the output tensor, the input tensors, and a closure that maps the
output gradient to input gradients.  Calling `Tape.backward(loss)` seeds the
loss gradient with ones and replays the nodes in reverse recording order;
forward order is a topological order, so each node is visited exactly once
and every tensor's gradient is fully accumulated before it is consumed.

Gradients accumulate by addition into `Tensor.grad`.  Broadcasting is not
supported except for bias addition over leading axes (see `add`); anything
else must be made explicit with `reshape`/`concatenate` so that backward
rules stay unambiguous.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class Tensor:
    """A dense float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Small amount of operator sugar; everything routes through the module ops
    # so recording semantics stay in one place.
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scalar_scale(self, float(other))

    __rmul__ = __mul__


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Use as a context manager around the forward computation, then call
    `backward`.  Clearing drops every recorded node, releasing the
    intermediate tensors it kept alive.
    """

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self._nodes.append((out, inputs, backward_fn))

    def clear(self) -> None:
        self._nodes.clear()

    def backward(self, loss: Tensor) -> None:
        """Populate `.grad` on every tensor the loss depends on.

        The loss must be a scalar recorded on this tape (directly or through
        ancestors).  Gradients accumulate into existing `.grad` buffers, so
        zero them between backward passes unless accumulation is intended.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self._nodes:
            raise RuntimeError("backward on an empty tape")
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        else:
            loss.grad = loss.grad + np.ones_like(loss.data)
        for out, inputs, backward_fn in reversed(self._nodes):
            g = out.grad
            if g is None:
                continue
            grads = backward_fn(g)
            for t, gi in zip(inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    # Take ownership only of freshly allocated arrays; views of
                    # the upstream gradient (and the upstream gradient itself)
                    # must be copied or later in-place accumulation would
                    # corrupt sibling gradients.
                    if gi.base is None and gi is not g:
                        t.grad = gi
                    else:
                        t.grad = gi.copy()
                else:
                    t.grad += gi


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _emit(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# Primitive operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.  Two forms: (..., k) @ (k, n) applies a weight matrix
    to the last axis; equal-rank stacks with identical leading dims multiply
    batchwise.  No other broadcasting."""
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        if ad.ndim < 1 or ad.shape[-1] != bd.shape[0]:
            raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
        out = ad @ bd

        def backward(g):
            k, n = bd.shape
            da = g @ bd.T if a.requires_grad else None
            db = ad.reshape(-1, k).T @ g.reshape(-1, n) if b.requires_grad else None
            return da, db

        return _emit(out, (a, b), backward)
    if ad.ndim == bd.ndim and ad.ndim >= 2 and ad.shape[:-2] == bd.shape[:-2]:
        if ad.shape[-1] != bd.shape[-2]:
            raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
        out = ad @ bd

        def backward(g):
            da = g @ bd.swapaxes(-1, -2) if a.requires_grad else None
            db = ad.swapaxes(-1, -2) @ g if b.requires_grad else None
            return da, db

        return _emit(out, (a, b), backward)
    raise ShapeError(f"matmul: unsupported operand shapes {ad.shape} @ {bd.shape}")


def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum of equal shapes, or bias add of a vector over the
    trailing axis of a higher-rank tensor."""
    xd, yd = x.data, y.data
    if xd.shape == yd.shape:
        def backward(g):
            return g, g

        return _emit(xd + yd, (x, y), backward)
    if yd.ndim == 1 and xd.ndim > 1 and xd.shape[-1] == yd.shape[0]:
        d = yd.shape[0]

        def backward(g):
            db = g.reshape(-1, d).sum(axis=0) if y.requires_grad else None
            return g, db

        return _emit(xd + yd, (x, y), backward)
    raise ShapeError(f"add: incompatible shapes {xd.shape} + {yd.shape}")


def multiply(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    if x.data.shape != y.data.shape:
        raise ShapeError(f"multiply: incompatible shapes {x.shape} * {y.shape}")
    xd, yd = x.data, y.data

    def backward(g):
        dx = g * yd if x.requires_grad else None
        dy = g * xd if y.requires_grad else None
        return dx, dy

    return _emit(xd * yd, (x, y), backward)


def scalar_scale(x: Tensor, c: float) -> Tensor:
    """Multiply every element by a python float constant."""
    c = float(c)

    def backward(g):
        return (g * c,)

    return _emit(x.data * c, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0

    def backward(g):
        return (g * mask,)

    return _emit(np.where(mask, x.data, 0.0), (x,), backward)


def log(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g):
        return (g / xd,)

    return _emit(np.log(xd), (x,), backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction."""
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _emit(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply a
    learned per-feature gain and bias."""
    xd = x.data
    d = xd.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gg = g * gain.data
        term = gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
        dx = inv * term
        g2 = g.reshape(-1, d)
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g2.sum(axis=0)
        return dx, dgain, dbias

    return _emit(out, (x, gain, bias), backward)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` by integer ids (ids are data, not a Tensor)."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding_lookup: ids must be integers")
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding_lookup: id out of range [0, {table.data.shape[0]}), got "
            f"[{ids.min()}, {ids.max()}]"
        )
    out = table.data[ids]
    d = table.data.shape[1]

    def backward(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, d))
        return (dt,)

    return _emit(out, (table,), backward)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concatenate: empty input list")
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _emit(out, tuple(tensors), backward)


def slice_tensor(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing; backward scatters into zeros."""
    out = x.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[key] = g.reshape(dx[key].shape)
        return (dx,)

    return _emit(out.copy(), (x,), backward)


def transpose(x: Tensor, axis1: int, axis2: int) -> Tensor:
    def backward(g):
        return (g.swapaxes(axis1, axis2),)

    return _emit(x.data.swapaxes(axis1, axis2), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.data.shape

    def backward(g):
        return (g.reshape(old),)

    return _emit(x.data.reshape(shape), (x,), backward)


def reduce_sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    xd = x.data
    if axis is None:
        out = np.asarray(xd.sum())

        def backward(g):
            return (np.full(xd.shape, float(g.reshape(()))),)

        return _emit(out, (x,), backward)
    out = xd.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, xd.shape),)

    return _emit(out, (x,), backward)


def reduce_mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    xd = x.data
    if axis is None:
        n = xd.size
        out = np.asarray(xd.mean())

        def backward(g):
            return (np.full(xd.shape, float(g.reshape(())) / n),)

        return _emit(out, (x,), backward)
    n = xd.shape[axis]
    out = xd.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge / n, xd.shape),)

    return _emit(out, (x,), backward)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace elements where `mask` is True with `value`.  The mask is plain
    data (bool array broadcastable to x) and receives no gradient."""
    mask_b = np.broadcast_to(np.asarray(mask, dtype=bool), x.data.shape)
    out = np.where(mask_b, float(value), x.data)

    def backward(g):
        return (g * ~mask_b,)

    return _emit(out, (x,), backward)


# ---------------------------------------------------------------------------
# Validation harness


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray,
    step: float = 1e-5,
) -> float:
    """Compare analytic gradients of scalar map `f` against central finite
    differences at `x`.

    Returns max over components of |analytic - numeric| / max(1, |analytic|).
    Raises if `f` produces a non-finite value anywhere in the sweep.
    """
    x = np.asarray(x, dtype=np.float64)
    leaf = Tensor(x.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
        if out.data.size != 1:
            raise ShapeError(f"finite_difference_check: f must return a scalar, got {out.shape}")
        if not np.isfinite(out.data).all():
            raise FloatingPointError("finite_difference_check: non-finite forward value")
        tape.backward(out)
    analytic = leaf.grad
    if analytic is None:
        analytic = np.zeros_like(x)
    if not np.isfinite(analytic).all():
        raise FloatingPointError("finite_difference_check: non-finite analytic gradient")

    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(Tensor(x)).data.reshape(())
        flat[i] = orig - step
        lo = f(Tensor(x)).data.reshape(())
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError("finite_difference_check: non-finite probe value")
        numeric = (hi - lo) / (2.0 * step)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(1.0, abs(a))
        if err > worst:
            worst = err
    return worst
