"""Dense tensors with reverse-mode autodiff.

Feature maps are N x C x H x W float32/float64 numpy arrays wrapped in
:class:`Tensor`. Every differentiable operation records its inputs and a
backward rule on the output tensor; ``Tensor.backward()`` walks the implicit
graph in reverse topological order. The engine is deliberately small: only
the operations the segmentation network needs, no broadcasting beyond
per-channel bias/affine terms, and strictly one dtype per graph.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericsError",
    "no_grad",
    "grad_enabled",
    "make_op",
    "accumulate_grad",
    "add",
    "sub",
    "mul",
    "scale",
    "add_channel_bias",
    "relu",
    "sigmoid",
    "softmax_rows",
    "matmul",
    "transpose_last2",
    "reshape",
    "concat_channels",
    "sum_all",
    "mean_all",
    "sum_last",
    "rsqrt",
    "conv2d",
    "conv2d_transpose",
    "upsample_depthwise",
    "maxpool2d",
    "adaptive_avg_pool2d",
    "batchnorm2d",
    "bce_with_logits",
    "count_params",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericsError(ArithmeticError):
    """An operation produced a NaN or Inf value."""


_GRAD_ENABLED = True

_DTYPES = (np.float32, np.float64)


class no_grad:
    """Context manager that disables graph recording (for eval passes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericsError(f"{op} produced non-finite values")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _DTYPES:
            arr = arr.astype(np.float64)
        _check_finite(arr, "Tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self) -> None:
        """Populate ``grad`` on every tensor this scalar depends on."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")

        # Iterative topological sort; training graphs are too deep for recursion.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        if self.grad is None:
            self.grad = np.ones_like(self.data)
        else:
            self.grad = self.grad + np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def accumulate_grad(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    """Add a gradient contribution to a tensor (creating the buffer lazily).

    ``own=True`` promises ``g`` is a freshly allocated array no one else holds,
    so it can be installed without a defensive copy.
    """
    if t.grad is None:
        if own and g.dtype == t.data.dtype and g.shape == t.data.shape:
            t.grad = g
        else:
            t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Wrap an op result, recording the graph edge when grads are live."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtypes {a.data.dtype} and {b.data.dtype} differ")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out_data = a.data + b.data

    def backward(g):
        # g is the child's grad buffer: dead after this call, so the first
        # parent may take it directly; the second must copy.
        accumulate_grad(a, g, own=True)
        accumulate_grad(b, g)

    return make_op(out_data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out_data = a.data - b.data

    def backward(g):
        accumulate_grad(a, g, own=True)
        accumulate_grad(b, -g, own=True)

    return make_op(out_data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out_data = a.data * b.data

    def backward(g):
        accumulate_grad(a, g * b.data, own=True)
        accumulate_grad(b, g * a.data, own=True)

    return make_op(out_data, (a, b), backward, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    out_data = a.data * s

    def backward(g):
        accumulate_grad(a, g * s, own=True)

    return make_op(out_data, (a,), backward, "scale")


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel vector along axis 1 of an N x C x ... tensor."""
    if b.data.ndim != 1 or x.data.ndim < 2 or x.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"add_channel_bias: channel axis {x.data.shape[1] if x.data.ndim > 1 else None}"
            f" != bias length {b.data.shape[0]}"
        )
    bshape = (1, b.data.shape[0]) + (1,) * (x.data.ndim - 2)
    out_data = x.data + b.data.reshape(bshape)
    reduce_axes = (0,) + tuple(range(2, x.data.ndim))

    def backward(g):
        accumulate_grad(x, g, own=True)
        accumulate_grad(b, g.sum(axis=reduce_axes), own=True)

    return make_op(out_data, (x, b), backward, "add_channel_bias")


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)
    mask = x.data > 0

    def backward(g):
        accumulate_grad(x, g * mask, own=True)

    return make_op(out_data, (x,), backward, "relu")


def _sigmoid_stable(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out_data = _sigmoid_stable(x.data)

    def backward(g):
        accumulate_grad(x, g * out_data * (1.0 - out_data), own=True)

    return make_op(out_data, (x,), backward, "sigmoid")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis; each row sums to 1 and is strictly positive."""
    if x.data.ndim < 2:
        raise ShapeError("softmax_rows expects at least 2 dims (rows x columns)")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        accumulate_grad(x, out_data * (g - dot), own=True)

    return make_op(out_data, (x,), backward, "softmax_rows")


def rsqrt(x: Tensor) -> Tensor:
    """1/sqrt(x); defined for strictly positive inputs."""
    if np.any(x.data <= 0):
        raise NumericsError("rsqrt requires strictly positive input")
    out_data = 1.0 / np.sqrt(x.data)

    def backward(g):
        accumulate_grad(x, g * (-0.5) * out_data / x.data, own=True)

    return make_op(out_data, (x,), backward, "rsqrt")


# ---------------------------------------------------------------------------
# shape manipulation / linear algebra
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out_data = x.data.reshape(shape)

    def backward(g):
        accumulate_grad(x, g.reshape(x.data.shape), own=True)

    return make_op(out_data, (x,), backward, "reshape")


def transpose_last2(x: Tensor) -> Tensor:
    out_data = np.ascontiguousarray(x.data.swapaxes(-1, -2))

    def backward(g):
        accumulate_grad(x, np.ascontiguousarray(g.swapaxes(-1, -2)), own=True)

    return make_op(out_data, (x,), backward, "transpose_last2")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out the leading/broadcast axes so g matches the given shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes with numpy-style leading broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul expects at least 2-D operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul: inner dims {a.data.shape[-1]} and {b.data.shape[-2]} differ"
        )
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"matmul: dtypes {a.data.dtype} and {b.data.dtype} differ")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        accumulate_grad(a, _reduce_to(ga, a.data.shape), own=True)
        accumulate_grad(b, _reduce_to(gb, b.data.shape), own=True)

    return make_op(out_data, (a, b), backward, "matmul")


def concat_channels(a: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    sa, sb = list(a.data.shape), list(b.data.shape)
    if len(sa) != len(sb):
        raise ShapeError(f"concat: ranks {len(sa)} and {len(sb)} differ")
    sa[axis] = sb[axis] = -1
    if sa != sb:
        raise ShapeError(f"concat: shapes {a.data.shape} and {b.data.shape} differ off-axis")
    out_data = np.concatenate([a.data, b.data], axis=axis)
    na = a.data.shape[axis]

    def backward(g):
        ga, gb = np.split(g, [na], axis=axis)
        accumulate_grad(a, np.ascontiguousarray(ga), own=True)
        accumulate_grad(b, np.ascontiguousarray(gb), own=True)

    return make_op(out_data, (a, b), backward, "concat_channels")


def sum_all(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g):
        accumulate_grad(x, np.full_like(x.data, g), own=True)

    return make_op(out_data, (x,), backward, "sum_all")


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


def sum_last(x: Tensor) -> Tensor:
    out_data = x.data.sum(axis=-1)

    def backward(g):
        accumulate_grad(x, np.broadcast_to(g[..., None], x.data.shape))

    return make_op(out_data, (x,), backward, "sum_last")


# ---------------------------------------------------------------------------
# convolution / pooling
# ---------------------------------------------------------------------------

def _conv_out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, :, p : p + h, p : p + w] = x
    return xp


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW map with a Cout x Cin x k x k kernel."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D, got {x.data.shape}")
    if w.data.ndim != 4 or w.data.shape[2] != w.data.shape[3]:
        raise ShapeError(f"conv2d: weight must be Cout x Cin x k x k, got {w.data.shape}")
    cout, cin, k, _ = w.data.shape
    if x.data.shape[1] != cin:
        raise ShapeError(f"conv2d: input channels {x.data.shape[1]} != weight Cin {cin}")
    if b.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.data.shape} != ({cout},)")
    if k % 2 != 1:
        raise ShapeError(f"conv2d: kernel size {k} must be odd")
    if stride < 1:
        raise ShapeError(f"conv2d: stride {stride} must be >= 1")
    n, _, h, wd = x.data.shape
    ho, wo = _conv_out_size(h, k, stride, padding), _conv_out_size(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: output would be empty for input {x.data.shape}, k={k}")

    if k == 1 and stride == 1 and padding == 0:
        # channel-mixing fast path: one batched GEMM, no window materialization
        xm = x.data.reshape(n, cin, h * wd)
        wm = w.data.reshape(cout, cin)
        out_data = np.matmul(wm, xm).reshape(n, cout, h, wd)
        out_data += b.data[None, :, None, None]

        def backward1(g):
            gm = g.reshape(n, cout, h * wd)
            accumulate_grad(b, g.sum(axis=(0, 2, 3)), own=True)
            accumulate_grad(
                w, np.tensordot(gm, xm, axes=([0, 2], [0, 2])).reshape(w.data.shape), own=True
            )
            if x.requires_grad:
                accumulate_grad(x, np.matmul(wm.T, gm).reshape(x.data.shape), own=True)

        return make_op(out_data, (x, w, b), backward1, "conv2d")

    if stride == 1:
        return _conv2d_shift(x, w, b, padding, n, cin, cout, k, h, wd, ho, wo)

    # strided fallback: explicit im2col
    xp = _pad_hw(x.data, padding) if padding else x.data
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * ho * wo, cin * k * k
    )
    wmat = w.data.reshape(cout, cin * k * k)
    out_data = (cols @ wmat.T).reshape(n, ho, wo, cout)
    out_data = np.ascontiguousarray(out_data.transpose(0, 3, 1, 2))
    out_data += b.data[None, :, None, None]

    def backward(g):
        accumulate_grad(b, g.sum(axis=(0, 2, 3)), own=True)
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        accumulate_grad(w, (gmat.T @ cols).reshape(w.data.shape), own=True)
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, cin, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
            accumulate_grad(x, np.ascontiguousarray(gx), own=True)

    return make_op(out_data, (x, w, b), backward, "conv2d")


def _conv2d_shift(x, w, b, p, n, cin, cout, k, h, wd, ho, wo):
    """Stride-1 convolution as k*k shifted GEMMs on row-flattened NHWC buffers.

    Working on the padded, flattened (N, Hp*Wp, C) layout keeps every slice a
    contiguous batch of matrices, so each kernel tap is one batched BLAS call
    with no gather. Positions past Wo in each output row are scratch and get
    cropped at the end.
    """
    hp, wp = h + 2 * p, wd + 2 * p
    xt = np.zeros((n, hp, wp, cin), dtype=x.data.dtype)
    xt[:, p : p + h, p : p + wd, :] = x.data.transpose(0, 2, 3, 1)
    xf = xt.reshape(n, hp * wp, cin)
    wk = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))  # (k, k, Cin, Cout)
    t_len = (ho - 1) * wp + wo

    acc = np.zeros((n, ho * wp, cout), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            off = i * wp + j
            acc[:, :t_len, :] += np.matmul(xf[:, off : off + t_len, :], wk[i, j])
    out_hwc = acc.reshape(n, ho, wp, cout)[:, :, :wo, :]
    out_data = np.ascontiguousarray(out_hwc.transpose(0, 3, 1, 2))
    out_data += b.data[None, :, None, None]

    def backward(g):
        accumulate_grad(b, g.sum(axis=(0, 2, 3)), own=True)
        gp = np.zeros((n, ho, wp, cout), dtype=g.dtype)
        gp[:, :, :wo, :] = g.transpose(0, 2, 3, 1)
        gpf = gp.reshape(n, ho * wp, cout)[:, :t_len, :]
        gwk = np.empty_like(wk)
        need_gx = x.requires_grad
        gxf = np.zeros((n, hp * wp, cin), dtype=g.dtype) if need_gx else None
        for i in range(k):
            for j in range(k):
                off = i * wp + j
                xs = xf[:, off : off + t_len, :]
                gwk[i, j] = np.matmul(xs.swapaxes(1, 2), gpf).sum(axis=0)
                if need_gx:
                    gxf[:, off : off + t_len, :] += np.matmul(gpf, wk[i, j].T)
        accumulate_grad(w, np.ascontiguousarray(gwk.transpose(3, 2, 0, 1)), own=True)
        if need_gx:
            gxt = gxf.reshape(n, hp, wp, cin)[:, p : p + h, p : p + wd, :]
            accumulate_grad(x, np.ascontiguousarray(gxt.transpose(0, 3, 1, 2)), own=True)

    return make_op(out_data, (x, w, b), backward, "conv2d")


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor, stride: int) -> Tensor:
    """Transposed convolution (adjoint of conv2d); weight is Cin x Cout x k x k."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d_transpose: operands must be 4-D")
    cin, cout, k, k2 = w.data.shape
    if k != k2:
        raise ShapeError(f"conv2d_transpose: kernel must be square, got {w.data.shape}")
    if x.data.shape[1] != cin:
        raise ShapeError(f"conv2d_transpose: input channels {x.data.shape[1]} != weight Cin {cin}")
    if stride not in (2, 4):
        raise ShapeError(f"conv2d_transpose: stride {stride} not in (2, 4)")
    if b.data.shape != (cout,):
        raise ShapeError(f"conv2d_transpose: bias shape {b.data.shape} != ({cout},)")
    n, _, h, wd = x.data.shape
    ho, wo = (h - 1) * stride + k, (wd - 1) * stride + k

    contrib = np.tensordot(x.data, w.data, axes=([1], [0]))  # (N, H, W, Cout, k, k)
    out_data = np.zeros((n, cout, ho, wo), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            out_data[:, :, i : i + stride * h : stride, j : j + stride * wd : stride] += (
                contrib[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    out_data += b.data[None, :, None, None]

    def backward(g):
        accumulate_grad(b, g.sum(axis=(0, 2, 3)))
        gwin = np.empty((n, cout, h, wd, k, k), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gwin[:, :, :, :, i, j] = g[:, :, i : i + stride * h : stride, j : j + stride * wd : stride]
        gx = np.tensordot(gwin, w.data, axes=([1, 4, 5], [1, 2, 3]))  # (N, H, W, Cin)
        accumulate_grad(x, np.ascontiguousarray(gx.transpose(0, 3, 1, 2)))
        gw = np.tensordot(x.data, gwin, axes=([0, 2, 3], [0, 2, 3]))  # (Cin, Cout, k, k)
        accumulate_grad(w, gw)

    return make_op(out_data, (x, w, b), backward, "conv2d_transpose")


def upsample_depthwise(x: Tensor, w: Tensor, b: Tensor, stride: int) -> Tensor:
    """Per-channel transposed conv with k == stride (disjoint output blocks)."""
    if x.data.ndim != 4 or w.data.ndim != 3:
        raise ShapeError("upsample_depthwise: x must be 4-D and w must be C x k x k")
    c, k, k2 = w.data.shape
    if k != k2 or k != stride:
        raise ShapeError(f"upsample_depthwise: kernel {w.data.shape} must be square with k == stride")
    if x.data.shape[1] != c:
        raise ShapeError(f"upsample_depthwise: channels {x.data.shape[1]} != weight C {c}")
    n, _, h, wd = x.data.shape
    out_data = np.einsum("nchw,cij->nchiwj", x.data, w.data).reshape(n, c, h * k, wd * k)
    out_data = out_data + b.data[None, :, None, None]

    def backward(g):
        gview = g.reshape(n, c, h, k, wd, k)
        accumulate_grad(b, g.sum(axis=(0, 2, 3)))
        accumulate_grad(w, np.einsum("nchiwj,nchw->cij", gview, x.data))
        accumulate_grad(x, np.einsum("nchiwj,cij->nchw", gview, w.data))

    return make_op(out_data, (x, w, b), backward, "upsample_depthwise")


def maxpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Window max; gradient flows to the first-occurrence argmax of each window."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: input must be 4-D, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if k == stride:
        if h % stride or w % stride:
            raise ShapeError(f"maxpool2d: dims ({h}, {w}) not divisible by stride {stride}")
        ho, wo = h // k, w // k
        win = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
        idx = win.argmax(axis=-1)
        out_data = win.max(axis=-1)

        def backward(g):
            gw = np.zeros_like(win)
            np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
            gx = gw.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            accumulate_grad(x, gx)

        return make_op(np.ascontiguousarray(out_data), (x,), backward, "maxpool2d")

    # general overlapping case
    ho, wo = _conv_out_size(h, k, stride, 0), _conv_out_size(w, k, stride, 0)
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, k * k)
    idx = flat.argmax(axis=-1)
    out_data = flat.max(axis=-1)

    def backward(g):
        gx = np.zeros_like(x.data)
        ii, jj = np.unravel_index(idx, (k, k))
        hh = (np.arange(ho) * stride)[None, None, :, None] + ii
        ww = (np.arange(wo) * stride)[None, None, None, :] + jj
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gx, (nn, cc, hh, ww), g)
        accumulate_grad(x, gx)

    return make_op(np.ascontiguousarray(out_data), (x,), backward, "maxpool2d")


def adaptive_avg_pool2d(x: Tensor, out_hw: int) -> Tensor:
    """Average pool to an out_hw x out_hw grid with adaptive window bounds."""
    if x.data.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool2d: input must be 4-D, got {x.data.shape}")
    n, c, h, w = x.data.shape
    o = int(out_hw)
    if o < 1:
        raise ShapeError("adaptive_avg_pool2d: output size must be >= 1")
    if h % o == 0 and w % o == 0:
        kh, kw = h // o, w // o
        out_data = x.data.reshape(n, c, o, kh, o, kw).mean(axis=(3, 5))

        def backward(g):
            gx = np.repeat(np.repeat(g, kh, axis=2), kw, axis=3) / (kh * kw)
            accumulate_grad(x, gx.astype(x.data.dtype, copy=False))

        return make_op(out_data.astype(x.data.dtype, copy=False), (x,), backward, "adaptive_avg_pool2d")

    hb = [(i * h // o, -(-(i + 1) * h // o)) for i in range(o)]
    wb = [(j * w // o, -(-(j + 1) * w // o)) for j in range(o)]
    out_data = np.empty((n, c, o, o), dtype=x.data.dtype)
    for i, (h0, h1) in enumerate(hb):
        for j, (w0, w1) in enumerate(wb):
            out_data[:, :, i, j] = x.data[:, :, h0:h1, w0:w1].mean(axis=(2, 3))

    def backward(g):
        gx = np.zeros_like(x.data)
        for i, (h0, h1) in enumerate(hb):
            for j, (w0, w1) in enumerate(wb):
                area = (h1 - h0) * (w1 - w0)
                gx[:, :, h0:h1, w0:w1] += g[:, :, i : i + 1, j : j + 1] / area
        accumulate_grad(x, gx)

    return make_op(out_data, (x,), backward, "adaptive_avg_pool2d")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch norm. Train mode updates the running buffers in place."""
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d: input must be 4-D, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if n == 0:
        raise ShapeError("batchnorm2d: zero-size batch")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batchnorm2d: affine params must have shape ({c},)")

    if train:
        m = n * h * w
        s1 = np.einsum("nchw->c", x.data, dtype=x.data.dtype)
        s2 = np.einsum("nchw,nchw->c", x.data, x.data, dtype=x.data.dtype)
        mean = s1 / m
        var = np.maximum(s2 / m - mean * mean, 0.0)
        ivstd = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None]) * ivstd[None, :, None, None]
        # PyTorch convention: biased var normalizes, unbiased var feeds the buffer.
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)
        out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

        def backward(g):
            accumulate_grad(beta, np.einsum("nchw->c", g, dtype=g.dtype), own=True)
            accumulate_grad(gamma, np.einsum("nchw,nchw->c", g, xhat, dtype=g.dtype), own=True)
            dxhat = g * gamma.data[None, :, None, None]
            t1 = np.einsum("nchw->c", dxhat, dtype=g.dtype)
            t2 = np.einsum("nchw,nchw->c", dxhat, xhat, dtype=g.dtype)
            dxhat -= t1[None, :, None, None] / m
            dxhat -= xhat * (t2[None, :, None, None] / m)
            dxhat *= ivstd[None, :, None, None]
            accumulate_grad(x, dxhat.astype(x.data.dtype, copy=False), own=True)

        return make_op(out_data.astype(x.data.dtype, copy=False), (x, gamma, beta), backward, "batchnorm2d")

    ivstd = (1.0 / np.sqrt(running_var + eps)).astype(x.data.dtype)
    mean = running_mean.astype(x.data.dtype)
    xhat = (x.data - mean[None, :, None, None]) * ivstd[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        accumulate_grad(beta, g.sum(axis=(0, 2, 3)), own=True)
        accumulate_grad(gamma, (g * xhat).sum(axis=(0, 2, 3)), own=True)
        accumulate_grad(x, g * (gamma.data * ivstd)[None, :, None, None], own=True)

    return make_op(out_data, (x, gamma, beta), backward, "batchnorm2d")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross entropy evaluated in the numerically stable logit form."""
    t = np.asarray(target)
    if t.shape != logits.data.shape:
        raise ShapeError(f"bce: target shape {t.shape} != logits shape {logits.data.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("bce: target must be binary (0/1)")
    t = t.astype(logits.data.dtype)
    z = logits.data
    per_elem = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out_data = np.asarray(per_elem.mean(), dtype=z.dtype)
    inv = 1.0 / z.size

    def backward(g):
        accumulate_grad(logits, (g * inv) * (_sigmoid_stable(z) - t))

    return make_op(out_data, (logits,), backward, "bce_with_logits")


def count_params(params: Iterable[Tensor]) -> int:
    """Total element count over a collection of learnable tensors."""
    return int(sum(p.data.size for p in params))
