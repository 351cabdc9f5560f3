"""Dense tensors with tape-based reverse-mode differentiation.

Operations executed inside an active :class:`Tape` are recorded together
with a closure that maps the output gradient to input gradients.  Calling
:meth:`Tape.backward` replays the records in reverse order.  Outside a tape
the same operations run as plain numpy computations (inference mode).

Storage precision follows the inputs: training uses float32, gradient checks
run the identical code path in float64.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "tensor",
    "elementwise",
    "add",
    "mul",
    "relu",
    "sigmoid",
    "scale",
    "add_scalar",
    "matmul",
    "bias_add",
    "conv2d",
    "maxpool2d",
    "log_softmax",
    "reshape",
    "transpose",
    "sum",
    "mean",
    "pick",
    "backward",
    "grad_check",
    "numerical_grad",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class Tensor:
    """A dense real array, optionally tracked for differentiation.

    ``values`` is never modified in place by the library; ``grad`` is
    populated (and accumulated) only by :meth:`Tape.backward`.
    """

    __slots__ = ("values", "grad", "tracked", "name", "derived")

    def __init__(self, values, tracked: bool = False, name: str | None = None):
        arr = np.asarray(values)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.values = arr
        self.grad: Optional[np.ndarray] = None
        self.tracked = bool(tracked)
        self.name = name
        # set on outputs of recorded ops: not a leaf, but gradients pass through
        self.derived = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar; strict-shape semantics of the underlying ops apply
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def tensor(values, tracked: bool = False, dtype=None, name: str | None = None) -> Tensor:
    arr = np.array(values, dtype=dtype if dtype is not None else None)
    if dtype is None and arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return Tensor(arr, tracked=tracked, name=name)


class _Record:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of the operations of one forward pass.

    Use as a context manager; operations on tensors that require gradients
    are recorded only while a tape is active.  A tape is meant to be used for
    a single backward pass and then dropped.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        self.records.append(_Record(out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every tracked tensor reachable from ``loss``."""
        if loss.values.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise RuntimeError("tape already replayed; record a new forward pass")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        for rec in reversed(self.records):
            g_out = grads.pop(id(rec.out), None)
            if g_out is None:
                continue
            in_grads = rec.backward_fn(g_out)
            for inp, g in zip(rec.inputs, in_grads):
                if g is None or not _needs_grad(inp):
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        # leaves: whatever is left and is tracked
        for rec in self.records:
            for inp in rec.inputs:
                if inp.tracked and id(inp) in grads:
                    g = grads.pop(id(inp)).astype(inp.values.dtype, copy=False)
                    inp.grad = g if inp.grad is None else inp.grad + g
        if loss.tracked and id(loss) in grads:
            loss.grad = grads.pop(id(loss))


def _needs_grad(t: Tensor) -> bool:
    return t.tracked or t.derived


def _emit(values: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = _ACTIVE[-1] if _ACTIVE else None
    if tape is None or not any(_needs_grad(t) for t in inputs):
        return Tensor(values)
    out = Tensor(values)
    out.derived = True
    tape._record(out, tuple(inputs), backward_fn)
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _emit(a.values + b.values, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    av, bv = a.values, b.values
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.values, 0)
    return _emit(out, (a,), lambda g: (np.where(out > 0, g, 0),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.values
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    return _emit(s, (a,), lambda g: (g * s * (1 - s),))


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit(a.values * a.dtype.type(factor), (a,), lambda g: (g * factor,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _emit(a.values + a.dtype.type(c), (a,), lambda g: (g,))


_ELEMENTWISE = {"add": add, "mul": mul, "relu": relu, "sigmoid": sigmoid}


def elementwise(kind: str, a: Tensor, b: Tensor | float | None = None) -> Tensor:
    """Dispatch by name: ``add``, ``mul``, ``relu``, ``sigmoid`` or ``scale``."""
    if kind == "scale":
        if b is None:
            raise ValueError("scale needs a factor")
        return scale(a, float(b.values) if isinstance(b, Tensor) else float(b))
    if kind in ("add", "mul"):
        if not isinstance(b, Tensor):
            raise ValueError(f"{kind} needs a second tensor")
        return _ELEMENTWISE[kind](a, b)
    if kind in ("relu", "sigmoid"):
        return _ELEMENTWISE[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    av, bv = a.values, b.values
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-feature bias along the last axis (``x[..., j] + bias[j]``)."""
    if bias.values.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"bias_add: bias {bias.shape} does not fit input {x.shape}")
    axes = tuple(range(x.values.ndim - 1))
    return _emit(x.values + bias.values, (x, bias), lambda g: (g, g.sum(axis=axes)))


# ---------------------------------------------------------------- convolution


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _to_cbhw(arr: np.ndarray, layout: str) -> np.ndarray:
    if layout == "NCHW":
        return np.ascontiguousarray(arr.transpose(1, 0, 2, 3))
    if layout == "CNHW":
        return arr
    raise ValueError(f"unknown layout {layout!r}")


def _from_cbhw(arr: np.ndarray, layout: str) -> np.ndarray:
    return np.ascontiguousarray(arr.transpose(1, 0, 2, 3)) if layout == "NCHW" else arr


def conv2d(
    x: Tensor, w: Tensor, bias: Tensor, stride: int = 1, pad: int = 0, layout: str = "NCHW"
) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``layout="NCHW"`` is the usual batch-major order; ``"CNHW"`` (channel-major)
    is what the backbone uses internally since the patch matrix then needs no
    transposes.  The kernel is always ``(C_out, C_in, k, k)``.
    """
    if x.values.ndim != 4 or w.values.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    xv = _to_cbhw(x.values, layout)
    C, B, H, W = xv.shape
    O, Ci, kh, kw = w.shape
    if Ci != C:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {Ci}")
    if bias.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({O},)")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if kh > H + 2 * pad or kw > W + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * pad}x{W + 2 * pad}")
    Ho = conv_output_size(H, kh, stride, pad)
    Wo = conv_output_size(W, kw, stride, pad)

    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xv
    # patch matrix rows ordered (c, i, j) to match the kernel's reshape
    cols = np.empty((C, kh * kw, B, Ho, Wo), dtype=xv.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i * kw + j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    cols = cols.reshape(C * kh * kw, B * Ho * Wo)
    wmat = w.values.reshape(O, C * kh * kw)
    out = wmat @ cols
    out += bias.values[:, None]
    out = _from_cbhw(out.reshape(O, B, Ho, Wo), layout)

    def backward_fn(g):
        g2 = _to_cbhw(g, layout).reshape(O, B * Ho * Wo)
        gw = (g2 @ cols.T).reshape(w.shape)
        gb = g2.sum(axis=1)
        gx = None
        if _needs_grad(x):
            dcols = (wmat.T @ g2).reshape(C, kh * kw, B, Ho, Wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, i * kw + j]
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
            gx = _from_cbhw(gx, layout)
        return gx, gw, gb

    return _emit(out, (x, w, bias), backward_fn)


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Max pooling over the two trailing (spatial) axes of a 4-D tensor.

    Works for either batch-major or channel-major layout.  Ties send the
    gradient to the first maximal element in row-major scan order.
    """
    stride = window if stride is None else stride
    if x.values.ndim != 4:
        raise ShapeError(f"maxpool2d expects a 4-D input, got {x.shape}")
    P, Q, H, W = x.shape
    if window > H or window > W:
        raise ShapeError(f"maxpool2d: window {window} exceeds input {H}x{W}")
    if stride < 1:
        raise ValueError("maxpool2d: stride must be >= 1")
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    xv = x.values

    if window == 2 and stride == 2:
        # four strided views in scan order; first match wins ties
        parts = [xv[:, :, di:2 * Ho:2, dj:2 * Wo:2] for di in (0, 1) for dj in (0, 1)]
        out = np.maximum(np.maximum(parts[0], parts[1]), np.maximum(parts[2], parts[3]))

        def backward_fn(g):
            gx = np.zeros(xv.shape, dtype=g.dtype)
            taken = np.zeros(out.shape, dtype=bool)
            for k, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
                hit = parts[k] == out
                hit &= ~taken
                taken |= hit
                gx[:, :, di:2 * Ho:2, dj:2 * Wo:2] = np.where(hit, g, 0)
            return (gx,)

        return _emit(out, (x,), backward_fn)

    win = sliding_window_view(xv, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(P, Q, Ho, Wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        di, dj = np.divmod(arg, window)
        rows = np.arange(Ho)[:, None] * stride + di
        cols = np.arange(Wo)[None, :] * stride + dj
        gx = np.zeros(xv.shape, dtype=g.dtype)
        pi = np.arange(P)[:, None, None, None]
        qi = np.arange(Q)[None, :, None, None]
        if stride >= window:
            gx[pi, qi, rows, cols] = g
        else:
            np.add.at(gx, (pi, qi, rows, cols), g)
        return (gx,)

    return _emit(np.ascontiguousarray(out), (x,), backward_fn)


# ---------------------------------------------------------------- reductions and shape


def log_softmax(logits: Tensor) -> Tensor:
    """Log-softmax along the last axis, stabilised by max subtraction."""
    if logits.values.ndim < 1 or logits.shape[-1] < 2:
        raise ShapeError(f"log_softmax needs at least 2 classes on the last axis, got {logits.shape}")
    z = logits.values
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward_fn(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _emit(out, (logits,), backward_fn)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _emit(a.values.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.ascontiguousarray(a.values.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    src = a.shape
    if axis is None:
        return _emit(np.asarray(a.values.sum()), (a,), lambda g: (np.broadcast_to(g, src).copy(),))
    ax = axis % a.values.ndim
    return _emit(
        a.values.sum(axis=ax),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), src).copy(),),
    )


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.size if axis is None else a.shape[axis % a.values.ndim]
    return scale(sum(a, axis), 1.0 / count)


def pick(a: Tensor, index: np.ndarray) -> Tensor:
    """Select ``a[i, ..., index[i]]``: one entry of the last axis per leading row."""
    if a.values.ndim < 2:
        raise ShapeError(f"pick expects at least a 2-D tensor, got {a.shape}")
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (a.shape[0],):
        raise ShapeError(f"pick: {index.shape} indices for {a.shape[0]} rows")
    rows = np.arange(a.shape[0])
    src = a.shape

    def backward_fn(g):
        gx = np.zeros(src, dtype=g.dtype)
        gx[rows, ..., index] = g
        return (gx,)

    return _emit(a.values[rows, ..., index], (a,), backward_fn)


# ---------------------------------------------------------------- gradient utilities


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def numerical_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, coordinate by coordinate."""
    base = np.array(x.values, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(base.copy())).values)
        flat[i] = orig - h
        fm = float(f(Tensor(base.copy())).values)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the taped gradient of ``f`` at ``x`` and finite differences.

    ``f`` takes a tensor and returns a scalar tensor.  Evaluation is done in
    float64 regardless of the dtype of ``x``.
    """
    xt = Tensor(np.array(x.values, dtype=np.float64), tracked=True)
    with Tape() as tape:
        out = f(xt)
    tape.backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(xt.values)
    numeric = numerical_grad(f, xt, h)
    return relative_error(analytic, numeric)
