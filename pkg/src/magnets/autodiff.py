"""Small define-by-run reverse-mode autodiff engine on float64 numpy arrays.

Only the operations the mask-and-aggregate pipeline needs are provided. Every
op validates shapes up front and, when a :class:`Tape` is active and any input
requires a gradient, records a closure that maps the output gradient to input
gradients.

Usage::

    with Tape() as tape:
        loss = ad.sum(ad.square(ad.matmul(x, w)))
    tape.backward(loss)
    w.grad
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "active_tape",
    "tensor",
    "add",
    "add_bias",
    "sub",
    "mul",
    "scale",
    "square",
    "abs",
    "relu",
    "sigmoid",
    "matmul",
    "linear",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "conv1d",
    "conv1d_transposed",
    "conv1d_stride2",
    "maxpool1d",
    "ste_binarize",
    "aggregate",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A float64 array plus an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


_local = threading.local()


def active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    A tape is confined to the thread that opened it. ``backward`` consumes the
    records, so a tape is used for exactly one backward pass.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.unvisited = 0

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        self.records.append(_Record(tuple(inputs), output, backward))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

        Intermediate gradients are released as soon as they are consumed.
        Records whose output never received a gradient are counted in
        ``self.unvisited``; the tape is empty afterwards either way.
        """
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64)}
        leaves: dict[int, Tensor] = {}
        self.unvisited = 0
        records, self.records = self.records, []
        for rec in reversed(records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                self.unvisited += 1
                continue
            input_grads = rec.backward(g)
            for inp, ig in zip(rec.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                    leaves[key] = inp
        # whatever is left in ``grads`` belongs to leaves (never an op output)
        for key, g in grads.items():
            t = leaves.get(key, loss if key == id(loss) else None)
            if t is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = active_tape()
    track = tape is not None and _needs_grad(*inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.record(inputs, out, backward)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def add_bias(x: Tensor, bias: Tensor, axis: int = 1) -> Tensor:
    """Add a 1-D ``bias`` along ``axis`` of ``x``; the only broadcasting op."""
    axis = axis % x.data.ndim
    if bias.data.ndim != 1 or bias.shape[0] != x.shape[axis]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.data.ndim
    view[axis] = -1
    others = tuple(i for i in range(x.data.ndim) if i != axis)
    return _emit(x.data + bias.data.reshape(view), (x, bias), lambda g: (g, g.sum(axis=others)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _emit(xd * xd, (x,), lambda g: (2.0 * xd * g,))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    """Absolute value; the subgradient at 0 is taken as 0."""
    xd = x.data
    return _emit(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def relu(x: Tensor) -> Tensor:
    """max(x, 0) with derivative 0 at x == 0."""
    pos = x.data > 0
    return _emit(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def ste_binarize(relaxed: Tensor) -> Tensor:
    """Hard threshold ``relaxed > 0.5`` forward, identity backward."""
    hard = (relaxed.data > 0.5).astype(np.float64)
    return _emit(hard, (relaxed,), lambda g: (g,))


# ---------------------------------------------------------------- reductions / shape


def sum(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    shape = x.shape
    if axis is None:
        return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % x.data.ndim for a in axes)

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return _emit(x.data.sum(axis=axes), (x,), back)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return _emit(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from err
    return _emit(data, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.shape}")
    return _emit(x.data.T.copy(), (x,), lambda g: (g.T,))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    ref = xs[0].shape
    axis = axis % len(ref)
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), back)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x`` of shape [B, F] and ``weight`` [F, K].

    A 1-D ``weight`` of length F maps [B, F] to [B].
    """
    if x.data.ndim != 2:
        raise ShapeError(f"linear: input must be [B, F], got {x.shape}")
    vector = weight.data.ndim == 1
    if weight.shape[0] != x.shape[1] or weight.data.ndim > 2:
        raise ShapeError(f"linear: weight {weight.shape} does not fit input {x.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        expected = () if vector else (wd.shape[1],)
        if bias.shape != expected:
            raise ShapeError(f"linear: bias {bias.shape}, expected {expected}")
        out = out + bias.data

    def back(g):
        if vector:
            grads = (np.outer(g, wd), xd.T @ g)
        else:
            grads = (g @ wd.T, xd.T @ g)
        if bias is None:
            return grads
        return grads + ((g.sum(axis=0)),)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(out, inputs, back)


# ---------------------------------------------------------------- convolutions


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation with "same" zero padding.

    x: [B, Cin, T], kernel: [Cout, Cin, k] with k odd, bias: [Cout].
    """
    if x.data.ndim != 3 or kernel.data.ndim != 3:
        raise ShapeError(f"conv1d: expected 3-D input and kernel, got {x.shape}, {kernel.shape}")
    B, cin, T = x.shape
    cout, kcin, k = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv1d: kernel expects {kcin} input channels, input has {cin}")
    if k % 2 == 0:
        raise ShapeError(f"conv1d: kernel size must be odd, got {k}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv1d: bias {bias.shape}, expected ({cout},)")
    p = (k - 1) // 2
    w2 = kernel.data.reshape(cout, cin * k)
    if k == 1:
        cols = x.data
    else:
        xp = np.zeros((B, cin, T + 2 * p))
        xp[:, :, p:p + T] = x.data
        # [B, Cin, k, T] flattened so that row (i, j) matches kernel[:, i, j]
        cols = np.stack([xp[:, :, j:j + T] for j in range(k)], axis=2).reshape(B, cin * k, T)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]

    def back(g):
        gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(cout, cin, k)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g)
            if k == 1:
                gx = gcols
            else:
                gcols = gcols.reshape(B, cin, k, T)
                gxp = np.zeros((B, cin, T + 2 * p))
                for j in range(k):
                    gxp[:, :, j:j + T] += gcols[:, :, j]
                gx = gxp[:, :, p:p + T]
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2)),)
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit(out, inputs, back)


def conv1d_transposed(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-2, size-2 transposed convolution that doubles the time axis.

    x: [B, Cin, T], kernel: [Cin, Cout, 2] -> [B, Cout, 2T], with
    ``out[b, o, 2t + j] = sum_i x[b, i, t] * kernel[i, o, j]``.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 3:
        raise ShapeError(f"conv1d_transposed: expected 3-D operands, got {x.shape}, {kernel.shape}")
    B, cin, T = x.shape
    kcin, cout, k = kernel.shape
    if kcin != cin or k != 2:
        raise ShapeError(f"conv1d_transposed: kernel {kernel.shape} incompatible with input {x.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv1d_transposed: bias {bias.shape}, expected ({cout},)")
    xd = x.data
    wt = kernel.data.transpose(1, 2, 0).reshape(cout * 2, cin)
    out = np.matmul(wt, xd).reshape(B, cout, 2, T).transpose(0, 1, 3, 2).reshape(B, cout, 2 * T)
    if bias is not None:
        out += bias.data[None, :, None]

    def back(g):
        g2 = g.reshape(B, cout, T, 2).transpose(0, 1, 3, 2).reshape(B, cout * 2, T)
        gx = np.matmul(wt.T, g2) if x.requires_grad else None
        gwt = np.matmul(g2, xd.transpose(0, 2, 1)).sum(axis=0)
        gw = gwt.reshape(cout, 2, cin).transpose(2, 0, 1)
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2)),)
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit(out, inputs, back)


def conv1d_stride2(y: Tensor, kernel: Tensor) -> Tensor:
    """Stride-2, size-2 convolution without padding; adjoint of :func:`conv1d_transposed`.

    y: [B, Cout, 2T], kernel: [Cin, Cout, 2] -> [B, Cin, T].
    """
    B, cout, T2 = y.shape
    cin, kcout, k = kernel.shape
    if kcout != cout or k != 2 or T2 % 2:
        raise ShapeError(f"conv1d_stride2: kernel {kernel.shape} incompatible with input {y.shape}")
    T = T2 // 2
    y4 = y.data.reshape(B, cout, T, 2)
    wd = kernel.data
    out = np.tensordot(y4, wd, axes=([1, 3], [1, 2])).transpose(0, 2, 1)

    def back(g):
        gy = np.tensordot(g, wd, axes=([1], [0])).transpose(0, 2, 1, 3).reshape(B, cout, T2)
        gw = np.tensordot(g, y4, axes=([0, 2], [0, 2]))
        return gy, gw

    return _emit(np.ascontiguousarray(out), (y, kernel), back)


def maxpool1d(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Non-overlapping window-2 max pooling over time.

    Returns the pooled tensor and the absolute time index of each maximum.
    Ties go to the earlier index.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"maxpool1d: expected [B, C, T], got {x.shape}")
    B, C, T = x.shape
    if T % 2:
        raise ShapeError(f"maxpool1d: time length must be even, got {T}")
    pairs = x.data.reshape(B, C, T // 2, 2)
    second = pairs[..., 1] > pairs[..., 0]
    out = np.where(second, pairs[..., 1], pairs[..., 0])
    idx = 2 * np.arange(T // 2) + second

    def back(g):
        gx = np.zeros((B, C, T // 2, 2))
        gx[..., 0] = np.where(second, 0.0, g)
        gx[..., 1] = np.where(second, g, 0.0)
        return (gx.reshape(B, C, T),)

    return _emit(out, (x,), back), idx


# ---------------------------------------------------------------- pipeline specific


def aggregate(x: Tensor, masks: Tensor) -> Tensor:
    """Masked temporal sum ``z[b, c, m] = sum_t x[b, c, t] * masks[b, c, m, t]``."""
    if x.data.ndim != 3 or masks.data.ndim != 4:
        raise ShapeError(f"aggregate: expected x [B,C,T] and masks [B,C,M,T], got {x.shape}, {masks.shape}")
    B, C, T = x.shape
    if masks.shape[0] != B or masks.shape[1] != C or masks.shape[3] != T:
        raise ShapeError(f"aggregate: masks {masks.shape} do not match input {x.shape}")
    xd, md = x.data, masks.data
    z = np.einsum("bct,bcmt->bcm", xd, md)

    def back(g):
        gx = np.einsum("bcm,bcmt->bct", g, md) if x.requires_grad else None
        gm = g[..., None] * xd[:, :, None, :]
        return gx, gm

    return _emit(z, (x, masks), back)


# ---------------------------------------------------------------- verification


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``f`` must rebuild the computation from ``params`` on each call and be
    deterministic. The gap for one entry is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        out = f()
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    tape.backward(out)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            gap = np.abs(analytic.reshape(-1)[i] - numeric) / max(1.0, np.abs(numeric))
            worst = max(worst, float(gap))
    return worst
