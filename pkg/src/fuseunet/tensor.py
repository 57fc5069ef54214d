"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a float32/float64 numpy array. Primitive operations
record ``TapeNode`` entries on the active ``Tape``; ``backward`` replays
the tape in reverse, visiting each node exactly once. Leaves (tensors not
produced by a recorded op) accumulate into ``.grad`` so repeated backward
calls add up until ``zero_grad``.

Every primitive validates that its forward output and backward gradients
are finite; NaN/Inf raises ``NumericError`` instead of propagating.

Convolutions dispatch to the kernel backend selected in
``fuseunet.kernels`` (numba by default, pure numpy fallback).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32

_FINITE_CHECKS = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle NaN/Inf validation of op outputs; returns the previous state."""
    global _FINITE_CHECKS
    old = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return old


def _ensure_finite(arr: np.ndarray, ctx: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {ctx}")


class TapeNode:
    __slots__ = ("name", "inputs", "out", "backward_fn", "tape")

    def __init__(self, name, inputs, out, backward_fn, tape):
        self.name = name
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Ordered record of primitive ops; also a context manager.

    ``with Tape():`` pushes a fresh tape so everything recorded inside is
    dropped on exit. A base tape is always active for ad-hoc use.
    """

    def __init__(self):
        self._nodes: list[TapeNode] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def clear(self) -> None:
        self._nodes.clear()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"


_TAPE_STACK: list[Tape] = [Tape()]
_GRAD_DISABLED = 0


def active_tape() -> Tape:
    return _TAPE_STACK[-1]


@contextlib.contextmanager
def no_grad():
    global _GRAD_DISABLED
    _GRAD_DISABLED += 1
    try:
        yield
    finally:
        _GRAD_DISABLED -= 1


def grad_enabled() -> bool:
    return _GRAD_DISABLED == 0


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise ConfigError("wrapping a Tensor in a Tensor; use .data")
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
            if arr.dtype not in (np.float32, np.float64):
                raise ConfigError(f"Tensor dtype must be float32/float64, got {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: TapeNode | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)


def _scalar_err(t: Tensor):
    raise ConfigError(f"item() needs a single-element tensor, got shape {t.shape}")


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def astensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _record(name: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn: Callable) -> Tensor:
    _ensure_finite(out_data, name)
    out = Tensor(out_data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = active_tape()
        node = TapeNode(name, tuple(inputs), out, backward_fn, tape)
        out._node = node
        tape._nodes.append(node)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    tape = active_tape()
    if loss._node is None or loss._node.tape is not tape:
        raise ConfigError("backward target was not recorded on the active tape")
    if loss.data.size != 1:
        raise ConfigError(f"backward requires a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape._nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            _ensure_finite(gi, f"{node.name}.backward")
            if t._node is None or t._node.tape is not tape:
                t.grad = gi if t.grad is None else t.grad + gi
            else:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi


# ---------------------------------------------------------------------------
# shape/scalar plumbing


def _as_operands(a, b, name):
    scalar_a = isinstance(a, (int, float))
    scalar_b = isinstance(b, (int, float))
    if scalar_a and scalar_b:
        raise ConfigError(f"{name}: at least one operand must be a Tensor")
    if scalar_a:
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if scalar_b:
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.dtype != b.dtype:
        raise ConfigError(f"{name}: dtype mismatch {a.dtype} vs {b.dtype}")
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape} (only scalar broadcast allowed)")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # undo scalar broadcasting
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if np.prod(shape, dtype=int) == 1 else np.broadcast_to(g, shape).copy()


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    a, b = _as_operands(a, b, "add")
    out = a.data + b.data
    return _record("add", (a, b), out, lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b):
    a, b = _as_operands(a, b, "sub")
    out = a.data - b.data
    return _record("sub", (a, b), out, lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b):
    a, b = _as_operands(a, b, "mul")
    out = a.data * b.data
    return _record(
        "mul", (a, b), out, lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape))
    )


def div(a, b):
    a, b = _as_operands(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = a.data / b.data
    _ensure_finite(out, "div")

    def bwd(g):
        return (
            _reduce_to(g / b.data, a.shape),
            _reduce_to(-g * a.data / (b.data * b.data), b.shape),
        )

    return _record("div", (a, b), out, bwd)


def maximum(a, b):
    """Elementwise max; ties route the gradient to the first operand."""
    a, b = _as_operands(a, b, "maximum")
    out = np.maximum(a.data, b.data)

    def bwd(g):
        first = a.data >= b.data
        return (_reduce_to(g * first, a.shape), _reduce_to(g * ~first, b.shape))

    return _record("maximum", (a, b), out, bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _record("relu", (x,), out, lambda g: (g * (x.data > 0),))


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    out = np.where(x.data > 0, x.data, alpha * x.data)
    return _record("leaky_relu", (x,), out, lambda g: (g * np.where(x.data > 0, 1.0, alpha).astype(x.dtype),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    _ensure_finite(out, "exp")
    return _record("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log of non-positive value")
    out = np.log(x.data)
    return _record("log", (x,), out, lambda g: (g / x.data,))


def power(x: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    if exponent != int(exponent) and np.any(x.data < 0):
        raise NumericError(f"negative base with fractional exponent {exponent}")
    with np.errstate(over="ignore", divide="ignore"):
        out = np.power(x.data, exponent)
    _ensure_finite(out, "power")

    def bwd(g):
        if exponent == 0.0:
            return (np.zeros_like(x.data),)
        return (g * exponent * np.power(x.data, exponent - 1.0),)

    return _record("power", (x,), out, bwd)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)

    def bwd(g):
        mask = (x.data >= lo) & (x.data <= hi)
        return (g * mask,)

    return _record("clip", (x,), out, bwd)


# ---------------------------------------------------------------------------
# reductions and reshapes


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(sorted(a % ndim for a in axis))
    if len(set(axes)) != len(axes):
        raise ConfigError(f"duplicate axes {axis}")
    return axes


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            for a in axes:
                g = np.expand_dims(g, a)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", (x,), np.asarray(out, dtype=x.dtype), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes], dtype=int))
    return mul(sum_(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _record("transpose", (x,), out, lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def concat(tensors: Iterable[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ConfigError("concat of zero tensors")
    dtype = tensors[0].dtype
    for t in tensors:
        if t.dtype != dtype:
            raise ConfigError("concat: dtype mismatch")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + extents)

    def bwd(g):
        slicer = [slice(None)] * g.ndim
        pieces = []
        for i in range(len(extents)):
            slicer[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            pieces.append(np.ascontiguousarray(g[tuple(slicer)]))
        return tuple(pieces)

    return _record("concat", tuple(tensors), out, bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    axis = axis % x.ndim
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] outside axis {axis} of {x.shape}")
    slicer = [slice(None)] * x.ndim
    slicer[axis] = slice(start, start + length)
    out = np.ascontiguousarray(x.data[tuple(slicer)])

    def bwd(g):
        full = np.zeros_like(x.data)
        full[tuple(slicer)] = g
        return (full,)

    return _record("narrow", (x,), out, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dtype != b.dtype:
        raise ConfigError("matmul: dtype mismatch")
    if a.ndim not in (2, 3) or b.ndim != a.ndim:
        raise ShapeError(f"matmul supports matching 2-D or 3-D operands, got {a.shape} @ {b.shape}")
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul batch mismatch {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner mismatch {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)
    _ensure_finite(out, "matmul")

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (ga, gb)

    return _record("matmul", (a, b), out, bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = axis % x.ndim
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _record("softmax", (x,), out, bwd)


def pad2d(x: Tensor, ph: int, pw: int) -> Tensor:
    """Zero-pad the two trailing (spatial) axes of an NCHW tensor."""
    if x.ndim != 4:
        raise ShapeError(f"pad2d expects 4-D input, got {x.shape}")
    if ph < 0 or pw < 0:
        raise ConfigError("pad2d amounts must be non-negative")
    if ph == 0 and pw == 0:
        return x
    out = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))

    def bwd(g):
        h = slice(ph, g.shape[2] - ph) if ph else slice(None)
        w = slice(pw, g.shape[3] - pw) if pw else slice(None)
        return (np.ascontiguousarray(g[:, :, h, w]),)

    return _record("pad2d", (x,), out, bwd)


# ---------------------------------------------------------------------------
# convolution primitives


def _conv_out_extent(size, k, stride, padding, dilation):
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Cross-correlation of NCHW input with [Cout,Cin,kh,kw] weights."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weight, got {x.shape} / {weight.shape}")
    if stride < 1 or dilation < 1:
        raise ConfigError(f"conv2d stride/dilation must be >= 1, got {stride}/{dilation}")
    B, Ci, H, W = x.shape
    Co, Ciw, KH, KW = weight.shape
    if KH < 1 or KW < 1:
        raise ConfigError("conv2d kernel extents must be >= 1")
    if Ci != Ciw:
        raise ShapeError(f"conv2d channel mismatch: input has {Ci}, weight expects {Ciw}")
    Ho = _conv_out_extent(H, KH, stride, padding, dilation)
    Wo = _conv_out_extent(W, KW, stride, padding, dilation)
    if Ho < 1 or Wo < 1:
        raise ConfigError(
            f"conv2d window {KH}x{KW} (dilation {dilation}) does not fit input {H}x{W} with padding {padding}"
        )
    out = kernels.conv2d_forward(x.data, weight.data, stride, padding, dilation)
    inputs = [x, weight]
    if bias is not None:
        if bias.shape != (Co,):
            raise ShapeError(f"conv2d bias must have shape ({Co},), got {bias.shape}")
        out = out + bias.data.reshape(1, -1, 1, 1)
        inputs.append(bias)

    def bwd(g):
        dx = kernels.conv2d_backward_input(g, weight.data, stride, padding, dilation, H, W)
        dw = kernels.conv2d_backward_weight(g, x.data, stride, padding, dilation, KH, KW)
        if bias is None:
            return (dx, dw)
        return (dx, dw, g.sum(axis=(0, 2, 3)))

    return _record("conv2d", tuple(inputs), out, bwd)


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Adjoint of conv2d: weight layout [Cin, Cout, kh, kw] maps Cin -> Cout.

    ``conv_transpose2d(y, w)`` applied to conv2d's output gradient equals
    conv2d's input gradient for the same weight tensor.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-D input/weight, got {x.shape} / {weight.shape}")
    if stride < 1:
        raise ConfigError(f"conv_transpose2d stride must be >= 1, got {stride}")
    B, Ci, H, W = x.shape
    Ciw, Co, KH, KW = weight.shape
    if Ci != Ciw:
        raise ShapeError(f"conv_transpose2d channel mismatch: input has {Ci}, weight expects {Ciw}")
    Ho = (H - 1) * stride - 2 * padding + KH
    Wo = (W - 1) * stride - 2 * padding + KW
    if Ho < 1 or Wo < 1:
        raise ConfigError("conv_transpose2d output extent must be positive")
    out = kernels.conv2d_backward_input(x.data, weight.data, stride, padding, 1, Ho, Wo)
    inputs = [x, weight]
    if bias is not None:
        if bias.shape != (Co,):
            raise ShapeError(f"conv_transpose2d bias must have shape ({Co},), got {bias.shape}")
        out = out + bias.data.reshape(1, -1, 1, 1)
        inputs.append(bias)

    def bwd(g):
        dx = kernels.conv2d_forward(g, weight.data, stride, padding, 1)
        dw = kernels.conv2d_backward_weight(x.data, g, stride, padding, 1, KH, KW)
        if bias is None:
            return (dx, dw)
        return (dx, dw, g.sum(axis=(0, 2, 3)))

    return _record("conv_transpose2d", tuple(inputs), out, bwd)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(batch, channel) normalization over the spatial plane with affine."""
    if x.ndim != 4:
        raise ShapeError(f"instance_norm expects 4-D input, got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"instance_norm affine params must have shape ({C},)")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data.reshape(1, C, 1, 1) * xhat + beta.data.reshape(1, C, 1, 1)
    m = x.shape[2] * x.shape[3]

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(1, C, 1, 1)
        dx = inv / m * (
            m * dxhat
            - dxhat.sum(axis=(2, 3), keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=(2, 3), keepdims=True)
        )
        return (dx.astype(x.dtype, copy=False), dgamma, dbeta)

    return _record("instance_norm", (x, gamma, beta), out.astype(x.dtype, copy=False), bwd)


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_check(
    f: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    step: float = 1e-5,
    max_coords_per_tensor: int | None = None,
    seed: int = 0,
    atol: float = 1e-6,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``f`` must be deterministic and scalar-valued; it is re-evaluated twice
    per probed coordinate. When ``max_coords_per_tensor`` is set, a seeded
    subsample of coordinates is probed per tensor (full sweep otherwise).
    Relative error per coordinate: |a - d| / (|a| + |d| + 1e-12), except
    that coordinates with |a - d| <= atol count as exact agreement (central
    differences cannot resolve mathematically-zero gradients below their
    own cancellation noise).
    Existing ``.grad`` contents on ``wrt`` are clobbered.
    """
    wrt = list(wrt)
    for t in wrt:
        if not t.requires_grad:
            raise ConfigError("finite_diff_check targets must require gradients")
        t.zero_grad()
    with Tape():
        loss = f()
        backward(loss)
    analytic = []
    for t in wrt:
        if t.grad is None:
            analytic.append(np.zeros_like(t.data))
        else:
            analytic.append(t.grad.copy())
        t.zero_grad()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, an in zip(wrt, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords_per_tensor is not None and n > max_coords_per_tensor:
            coords = rng.choice(n, size=max_coords_per_tensor, replace=False)
        else:
            coords = np.arange(n)
        an_flat = an.reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            with no_grad():
                fp = f().item()
            flat[idx] = orig - step
            with no_grad():
                fm = f().item()
            flat[idx] = orig
            diff = (fp - fm) / (2.0 * step)
            a = float(an_flat[idx])
            if abs(a - diff) <= atol:
                continue
            rel = abs(a - diff) / (abs(a) + abs(diff) + 1e-12)
            worst = max(worst, rel)
    return worst
