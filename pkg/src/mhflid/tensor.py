"""Minimal reverse-mode autodiff over dense float32 NumPy arrays.

Design rules, kept deliberately strict so failures surface as errors instead
of silent broadcasting:

* storage is float32; reductions (sum/mean/matmul/conv) accumulate in float64
  before casting back;
* elementwise binary ops require exactly equal shapes (scalars are allowed);
  the only implicit broadcasts are the documented bias adds inside ``conv2d``
  / ``conv_transpose2d`` / ``linear`` and the explicit ``expand`` op;
* the graph is built implicitly during the forward pass and consumed by a
  single reverse-topological sweep in ``Tensor.backward``; tensors whose
  ``requires_grad`` is False never receive a gradient, which is how stage
  freezing is enforced.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when operand shapes disagree with an op's contract."""


class _GradMode(threading.local):
    # thread-local so clients running on a thread pool can't toggle each
    # other's graph construction mid-stage; the class attribute is the
    # per-thread default
    enabled = True


_grad_mode = _GradMode()
_debug_checks = False


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (forward values only).

    The switch is per-thread: an evaluation running on one worker never
    affects training on another."""
    prev = _grad_mode.enabled
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = prev


def set_debug_checks(flag: bool) -> None:
    """Toggle the per-op finiteness assertion on forward outputs."""
    global _debug_checks
    _debug_checks = bool(flag)


def debug_checks_enabled() -> bool:
    return _debug_checks


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction -----------------------------------------------------

    @staticmethod
    def _node(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor(data)
        if _debug_checks and not np.isfinite(out.data).all():
            raise FloatingPointError("non-finite value produced by a forward op")
        if _grad_mode.enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

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
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- backward ---------------------------------------------------------

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() is only defined for scalar losses")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # Drop the graph and intermediate grads; leaves keep theirs.
        for node in topo:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                if node is not self:
                    node.grad = None

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return mul(sub(self, other), -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method sugar -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def relu(self) -> "Tensor":
        return relu(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.ascontiguousarray(g, dtype=np.float32)
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} != tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _const_like(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ (no implicit broadcasting)")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        out_data = a.data + np.float32(s)

        def bwd_scalar(g: np.ndarray) -> None:
            _accum(a, g)

        return Tensor._node(out_data, (a,), bwd_scalar)
    _check_same_shape(a, b, "add")

    def bwd(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, g)

    return Tensor._node(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same_shape(a, b, "sub")

    def bwd(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, -g)

    return Tensor._node(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = np.float32(b)

        def bwd_scalar(g: np.ndarray) -> None:
            _accum(a, g * s)

        return Tensor._node(a.data * s, (a,), bwd_scalar)
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bwd(g: np.ndarray) -> None:
        _accum(a, g * bd)
        _accum(b, g * ad)

    return Tensor._node(ad * bd, (a, b), bwd)


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    if b.data.shape not in ((), a.data.shape):
        raise ShapeError(f"div: denominator shape {b.data.shape} must be scalar or match {a.data.shape}")
    ad, bd = a.data, b.data

    def bwd(g: np.ndarray) -> None:
        if bd.shape == () and ad.shape != ():
            _accum(a, g / bd)
            _accum(b, np.float64(-(g * ad).sum(dtype=np.float64)) / (np.float64(bd) ** 2))
        else:
            _accum(a, g / bd)
            _accum(b, -g * ad / (bd * bd))

    out = ad.astype(np.float64) / bd.astype(np.float64)
    return Tensor._node(out.astype(np.float32), (a, b), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g: np.ndarray) -> None:
        _accum(a, g * mask)

    return Tensor._node(np.where(mask, a.data, np.float32(0.0)), (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g: np.ndarray) -> None:
        _accum(a, g * out_data)

    return Tensor._node(out_data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    ad = a.data

    def bwd(g: np.ndarray) -> None:
        _accum(a, g / ad)

    return Tensor._node(np.log(ad), (a,), bwd)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    in_shape = a.data.shape
    out_data = np.ascontiguousarray(a.data.reshape(shape))

    def bwd(g: np.ndarray) -> None:
        _accum(a, g.reshape(in_shape))

    return Tensor._node(out_data, (a,), bwd)


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {a.ndim} axes")
    inv = np.argsort(axes)

    def bwd(g: np.ndarray) -> None:
        _accum(a, np.ascontiguousarray(g.transpose(inv)))

    return Tensor._node(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def transpose_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError("transpose_last2 requires rank >= 2")
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return permute(a, axes)


def expand(a: Tensor, axis: int, reps: int) -> Tensor:
    """Broadcast a size-1 axis to ``reps`` copies (the one explicit broadcast)."""
    if a.data.shape[axis] != 1:
        raise ShapeError(f"expand: axis {axis} has size {a.data.shape[axis]}, expected 1")
    target = list(a.data.shape)
    target[axis] = reps

    def bwd(g: np.ndarray) -> None:
        _accum(a, g.sum(axis=axis, keepdims=True, dtype=np.float64).astype(np.float32))

    return Tensor._node(np.ascontiguousarray(np.broadcast_to(a.data, target)), (a,), bwd)


def channel(a: Tensor, index: int) -> Tensor:
    """Select one index along axis 1 (e.g. a class plane of (N, C, H, W))."""
    if a.ndim < 2:
        raise ShapeError("channel requires rank >= 2")
    if not 0 <= index < a.data.shape[1]:
        raise ShapeError(f"channel index {index} out of range for shape {a.data.shape}")
    in_shape = a.data.shape

    def bwd(g: np.ndarray) -> None:
        gx = np.zeros(in_shape, dtype=np.float32)
        gx[:, index] = g
        _accum(a, gx)

    return Tensor._node(np.ascontiguousarray(a.data[:, index]), (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and contractions
# ---------------------------------------------------------------------------


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    out64 = a.data.sum(axis=axes or None, keepdims=keepdims, dtype=np.float64)
    in_shape = a.data.shape

    def bwd(g: np.ndarray) -> None:
        gk = g
        if not keepdims:
            kshape = [1 if i in axes else s for i, s in enumerate(in_shape)]
            gk = g.reshape(kshape)
        _accum(a, np.broadcast_to(gk, in_shape))

    return Tensor._node(out64.astype(np.float32), (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out64 = a.data.sum(axis=axes or None, keepdims=keepdims, dtype=np.float64) / count
    in_shape = a.data.shape

    def bwd(g: np.ndarray) -> None:
        gk = g
        if not keepdims:
            kshape = [1 if i in axes else s for i, s in enumerate(in_shape)]
            gk = g.reshape(kshape)
        _accum(a, np.broadcast_to(gk / np.float32(count), in_shape))

    return Tensor._node(out64.astype(np.float32), (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim == b.ndim == 2:
        if a.data.shape[1] != b.data.shape[0]:
            raise ShapeError(f"matmul: inner dims {a.data.shape} @ {b.data.shape}")
    elif a.ndim == b.ndim == 3:
        if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
            raise ShapeError(f"matmul: batched dims {a.data.shape} @ {b.data.shape}")
    else:
        raise ShapeError(f"matmul supports 2D@2D or 3D@3D, got {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data
    out = ad.astype(np.float64) @ bd.astype(np.float64)

    def bwd(g: np.ndarray) -> None:
        g64 = g.astype(np.float64)
        swap = (0, 2, 1) if ad.ndim == 3 else (1, 0)
        _accum(a, (g64 @ bd.astype(np.float64).transpose(swap)).astype(np.float32))
        _accum(b, (ad.astype(np.float64).transpose(swap) @ g64).astype(np.float32))

    return Tensor._node(out.astype(np.float32), (a, b), bwd)


# ---------------------------------------------------------------------------
# nonlinear normalizers
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = axis % a.ndim
    x64 = a.data.astype(np.float64)
    x64 -= x64.max(axis=ax, keepdims=True)
    e = np.exp(x64)
    y64 = e / e.sum(axis=ax, keepdims=True)
    y = y64.astype(np.float32)

    def bwd(g: np.ndarray) -> None:
        g64 = g.astype(np.float64)
        dot = (g64 * y64).sum(axis=ax, keepdims=True)
        _accum(a, (y64 * (g64 - dot)).astype(np.float32))

    return Tensor._node(y, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = axis % a.ndim
    x64 = a.data.astype(np.float64)
    x64 -= x64.max(axis=ax, keepdims=True)
    ls64 = x64 - np.log(np.exp(x64).sum(axis=ax, keepdims=True))

    def bwd(g: np.ndarray) -> None:
        g64 = g.astype(np.float64)
        p = np.exp(ls64)
        _accum(a, (g64 - p * g64.sum(axis=ax, keepdims=True)).astype(np.float32))

    return Tensor._node(ls64.astype(np.float32), (a,), bwd)


# ---------------------------------------------------------------------------
# neural-net structured ops (hot paths dispatch to the kernel backend)
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input/weight, got {x.data.shape}, {w.data.shape}")
    n, c, h, wd = x.data.shape
    o, cw, kh, kw = w.data.shape
    if c != cw:
        raise ShapeError(f"conv2d: input channels {c} != weight channels {cw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride/padding ({stride}, {padding})")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1 or kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} (padding {padding})")
    if bias is not None and bias.data.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({o},)")
    out_data = kernels.conv2d_forward(x.data, w.data, stride, padding)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]
    xd, wdta = x.data, w.data
    parents = (x, w) if bias is None else (x, w, bias)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, kernels.conv2d_grad_input(g, wdta, stride, padding, h, wd))
        if w.requires_grad:
            _accum(w, kernels.conv2d_grad_weight(g, xd, stride, padding, kh, kw))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32))

    return Tensor._node(out_data, parents, bwd)


def conv_transpose2d(x: Tensor, w: Tensor, bias: Tensor | None, stride: int = 1) -> Tensor:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects rank-4 input/weight, got {x.data.shape}, {w.data.shape}")
    n, c, h, wd = x.data.shape
    cw, o, kh, kw = w.data.shape
    if c != cw:
        raise ShapeError(f"conv_transpose2d: input channels {c} != weight channels {cw}")
    if stride < 1:
        raise ShapeError(f"conv_transpose2d: bad stride {stride}")
    if bias is not None and bias.data.shape != (o,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.data.shape} != ({o},)")
    out_data = kernels.convt2d_forward(x.data, w.data, stride)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]
    xd, wdta = x.data, w.data
    parents = (x, w) if bias is None else (x, w, bias)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, kernels.convt2d_grad_input(g, wdta, stride))
        if w.requires_grad:
            _accum(w, kernels.convt2d_grad_weight(g, xd, stride, kh, kw))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32))

    return Tensor._node(out_data, parents, bwd)


def maxpool2d(x: Tensor, kernel: int, stride: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects rank-4 input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if kernel > h or kernel > w:
        raise ShapeError(f"maxpool2d: kernel {kernel} exceeds input {h}x{w}")
    if (h - kernel) // stride + 1 < 1 or (w - kernel) // stride + 1 < 1:
        raise ShapeError(f"maxpool2d: empty output for input {h}x{w}, kernel {kernel}, stride {stride}")
    out_data, idx = kernels.maxpool2d_forward(x.data, kernel, stride)

    def bwd(g: np.ndarray) -> None:
        _accum(x, kernels.maxpool2d_backward(g, idx, h, w, kernel, stride))

    return Tensor._node(out_data, (x,), bwd)


def linear(x: Tensor, w: Tensor, bias: Tensor | None) -> Tensor:
    if x.ndim < 2 or w.ndim != 2:
        raise ShapeError(f"linear expects (..., d_in) @ (d_in, d_out), got {x.data.shape}, {w.data.shape}")
    d_in, d_out = w.data.shape
    if x.data.shape[-1] != d_in:
        raise ShapeError(f"linear: input features {x.data.shape[-1]} != {d_in}")
    if bias is not None and bias.data.shape != (d_out,):
        raise ShapeError(f"linear: bias shape {bias.data.shape} != ({d_out},)")
    lead = x.data.shape[:-1]
    m = int(np.prod(lead)) if lead else 1
    x2 = x.data.reshape(m, d_in)
    out = x2.astype(np.float64) @ w.data.astype(np.float64)
    if bias is not None:
        out = out + bias.data.astype(np.float64)[None, :]
    parents = (x, w) if bias is None else (x, w, bias)

    def bwd(g: np.ndarray) -> None:
        g2 = g.reshape(m, d_out).astype(np.float64)
        if x.requires_grad:
            _accum(x, (g2 @ w.data.astype(np.float64).T).astype(np.float32).reshape(x.data.shape))
        if w.requires_grad:
            _accum(w, (x2.astype(np.float64).T @ g2).astype(np.float32))
        if bias is not None and bias.requires_grad:
            _accum(bias, g2.sum(axis=0).astype(np.float32))

    return Tensor._node(out.astype(np.float32).reshape(*lead, d_out), parents, bwd)


def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Feature-wise batch normalization over (N, F).

    Training mode normalizes with biased batch statistics and updates the
    running buffers in place (unbiased variance, matching the usual
    convention); eval mode reads the buffers and leaves them untouched.
    """
    if x.ndim != 2:
        raise ShapeError(f"batchnorm1d expects (N, F), got {x.data.shape}")
    n, f = x.data.shape
    if gamma.data.shape != (f,) or beta.data.shape != (f,):
        raise ShapeError("batchnorm1d: affine parameter shape mismatch")
    x64 = x.data.astype(np.float64)
    if training:
        if n < 2:
            raise ShapeError("batchnorm1d training mode needs batch size >= 2")
        mean = x64.mean(axis=0)
        var = x64.var(axis=0)  # biased, used for normalization
        unbiased = var * n / (n - 1)
        running_mean[:] = ((1.0 - momentum) * running_mean.astype(np.float64) + momentum * mean).astype(np.float32)
        running_var[:] = ((1.0 - momentum) * running_var.astype(np.float64) + momentum * unbiased).astype(np.float32)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mean) * inv_std
    out = gamma.data.astype(np.float64) * xhat + beta.data.astype(np.float64)

    def bwd(g: np.ndarray) -> None:
        g64 = g.astype(np.float64)
        if gamma.requires_grad:
            _accum(gamma, (g64 * xhat).sum(axis=0).astype(np.float32))
        if beta.requires_grad:
            _accum(beta, g64.sum(axis=0).astype(np.float32))
        if x.requires_grad:
            gscaled = g64 * gamma.data.astype(np.float64)
            if training:
                gx = inv_std * (gscaled - gscaled.mean(axis=0) - xhat * (gscaled * xhat).mean(axis=0))
            else:
                gx = gscaled * inv_std
            _accum(x, gx.astype(np.float32))

    return Tensor._node(out.astype(np.float32), (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class Parameter:
    """A named leaf tensor plus its optimizer slot state.

    ``trainable`` is the permanent nature of the parameter (False for
    buffers such as batch-norm running statistics); ``requires_grad`` on the
    tensor is the per-stage freeze switch.
    """

    name: str
    tensor: Tensor
    trainable: bool = True
    optimizer_state: dict = field(default_factory=dict)

    def freeze(self) -> None:
        self.tensor.requires_grad = False

    def unfreeze(self) -> None:
        if self.trainable:
            self.tensor.requires_grad = True


def freeze_all(params: Iterable[Parameter]) -> None:
    for p in params:
        p.freeze()


def unfreeze_all(params: Iterable[Parameter]) -> None:
    for p in params:
        p.unfreeze()
