"""float32 tensors with tape-recorded reverse-mode autodiff.

Every feature map, parameter and loss in this package is a :class:`Tensor`:
a dense row-major float32 numpy array plus an optional gradient buffer and
a backward closure recorded at op time. ``backward()`` replays the tape in
reverse topological order.

Heavy contractions (``matmul``, ``linear``, ``conv2d``) accumulate in
float64 and round the result to float32. That keeps the im2col and naive
convolution paths bit-identical on realistic inputs and keeps
finite-difference checks quiet.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DimensionError",
    "EvaluationError",
    "Tensor",
    "no_grad",
    "flop_counter",
    "add",
    "mul",
    "matmul",
    "linear",
    "conv2d",
    "conv2d_naive",
    "batchnorm2d",
    "maxpool2d",
    "upsample_nearest",
    "concat",
    "space_to_depth",
    "pixel_shuffle",
    "softmax",
    "layernorm",
    "sigmoid",
    "silu",
    "relu",
    "leaky_relu",
    "prelu",
    "bce_with_logits",
    "gather_rows",
    "grad_check",
]


class DimensionError(ValueError):
    """An op received inputs violating its shape contract."""


class EvaluationError(RuntimeError):
    """A checked function produced a non-finite value."""


_grad_enabled = True
_dtype = np.float32


class no_grad:
    """Context manager that stops ops from recording backward closures."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class double_precision:
    """Run ops in float64. Used by grad_check so finite differences measure
    formula correctness instead of float32 rounding noise; model execution
    stays float32."""

    def __enter__(self):
        global _dtype
        self._prev = _dtype
        _dtype = np.float64
        return self

    def __exit__(self, *exc):
        global _dtype
        _dtype = self._prev
        return False


class _FlopCounter:
    """Counts floating point ops as tensor ops execute (2 per MAC)."""

    def __init__(self):
        self.active = False
        self.flops = 0

    def add(self, n):
        if self.active:
            self.flops += int(n)

    def __enter__(self):
        self.active = True
        self.flops = 0
        return self

    def __exit__(self, *exc):
        self.active = False
        return False


flop_counter = _FlopCounter()


def _f32(x):
    return np.asarray(x, dtype=_dtype)


class Tensor:
    """Dense float32 array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad=False):
        self.data = _f32(data)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._backward = None
        self._prev = ()

    # ---- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # ---- autodiff ---------------------------------------------------------
    def detach(self):
        """New tensor sharing this data with no tape history."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t._backward = None
        t._prev = ()
        return t

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        g = np.asarray(g, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self):
        """Reverse-traverse the recorded tape from this scalar."""
        if self.data.size != 1:
            raise DimensionError(
                f"backward() requires a scalar tensor, got shape {self.data.shape}"
            )
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ---- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) > 1 else axes[0])

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    """Wrap op output; record tape edge only when gradients are live."""
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == _dtype else data.astype(_dtype)
    out.grad = None
    out.requires_grad = req
    out._backward = backward if req else None
    out._prev = tuple(parents) if req else ()
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{opname}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


# ---- elementwise arithmetic ------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")
    flop_counter.add(max(a.size, b.size))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")
    flop_counter.add(max(a.size, b.size))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(-_unbroadcast(g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")
    flop_counter.add(max(a.size, b.size))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "div")
    flop_counter.add(max(a.size, b.size))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), backward)


def neg(a):
    def backward(g):
        a.accumulate_grad(-g)

    return _make(-a.data, (a,), backward)


def power(a, p):
    p = float(p)

    def backward(g):
        a.accumulate_grad(g * p * np.power(a.data, p - 1.0))

    return _make(np.power(a.data, p), (a,), backward)


def exp(a):
    out_data = np.exp(a.data)

    def backward(g):
        a.accumulate_grad(g * out_data)

    return _make(out_data, (a,), backward)


def log(a):
    def backward(g):
        a.accumulate_grad(g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sqrt(a):
    out_data = np.sqrt(a.data)

    def backward(g):
        a.accumulate_grad(g / (2.0 * out_data))

    return _make(out_data, (a,), backward)


def arctan(a):
    def backward(g):
        a.accumulate_grad(g / (1.0 + a.data * a.data))

    return _make(np.arctan(a.data), (a,), backward)


def clamp(a, lo=None, hi=None):
    """Clip values; gradient passes only where no clipping happened."""
    out_data = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi

    def backward(g):
        a.accumulate_grad(np.where(inside, g, 0.0))

    return _make(out_data, (a,), backward)


def minimum(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "minimum")
    take_a = a.data <= b.data  # ties go to the first argument

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(np.where(take_a, g, 0.0), a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(np.where(take_a, 0.0, g), b.shape))

    return _make(np.minimum(a.data, b.data), (a, b), backward)


def maximum(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "maximum")
    take_a = a.data >= b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(np.where(take_a, g, 0.0), a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(np.where(take_a, 0.0, g), b.shape))

    return _make(np.maximum(a.data, b.data), (a, b), backward)


# ---- activations -----------------------------------------------------------

def sigmoid(a):
    s = 1.0 / (1.0 + np.exp(-a.data))
    flop_counter.add(a.size * 4)

    def backward(g):
        a.accumulate_grad(g * s * (1.0 - s))

    return _make(s, (a,), backward)


def silu(a):
    s = 1.0 / (1.0 + np.exp(-a.data))
    flop_counter.add(a.size * 5)

    def backward(g):
        a.accumulate_grad(g * s * (1.0 + a.data * (1.0 - s)))

    return _make(a.data * s, (a,), backward)


def relu(a):
    mask = a.data > 0
    flop_counter.add(a.size)

    def backward(g):
        a.accumulate_grad(np.where(mask, g, 0.0))

    return _make(np.maximum(a.data, 0.0), (a,), backward)


def leaky_relu(a, slope=0.2):
    slope = float(slope)
    mask = a.data > 0
    flop_counter.add(a.size)

    def backward(g):
        a.accumulate_grad(np.where(mask, g, np.float32(slope) * g))

    return _make(np.where(mask, a.data, np.float32(slope) * a.data), (a,), backward)


def prelu(a, alpha):
    """PReLU with learnable slope; ``alpha`` is scalar or per-channel (C,)."""
    al = alpha.data
    if al.ndim == 1 and a.ndim == 4:
        if al.shape[0] != a.shape[1]:
            raise DimensionError(
                f"prelu: alpha has {al.shape[0]} channels, input has {a.shape[1]}"
            )
        al = al.reshape(1, -1, 1, 1)
    elif al.size != 1:
        raise DimensionError("prelu: alpha must be scalar or per-channel (C,)")
    mask = a.data > 0
    out_data = np.where(mask, a.data, al * a.data)
    flop_counter.add(a.size)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.where(mask, g, al * g))
        if alpha.requires_grad:
            neg_part = np.where(mask, 0.0, g * a.data)
            if alpha.data.ndim == 1 and a.ndim == 4:
                alpha.accumulate_grad(neg_part.sum(axis=(0, 2, 3)))
            else:
                alpha.accumulate_grad(np.asarray(neg_part.sum(), dtype=np.float32).reshape(alpha.shape))

    return _make(out_data, (a, alpha), backward)


# ---- shape movement --------------------------------------------------------

def reshape(a, shape):
    old = a.data.shape

    def backward(g):
        a.accumulate_grad(g.reshape(old))

    return _make(np.ascontiguousarray(a.data.reshape(shape)), (a,), backward)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        a.accumulate_grad(np.ascontiguousarray(g.transpose(inv)))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t.accumulate_grad(np.ascontiguousarray(piece))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def narrow(a, axis, start, length):
    """Contiguous slice ``[start, start+length)`` along ``axis``."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        a.accumulate_grad(full)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), backward)


def gather_rows(a, index):
    """Select rows of a 2-D tensor; duplicate indices scatter-add on backward."""
    if a.ndim != 2:
        raise DimensionError(f"gather_rows expects a 2-D tensor, got shape {a.shape}")
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a.accumulate_grad(full)

    return _make(a.data[index], (a,), backward)


# ---- reductions ------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims=False):
    axis = _norm_axis(axis, a.ndim)
    out_data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(_dtype)
    flop_counter.add(a.size)

    def backward(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        a.accumulate_grad(np.broadcast_to(gg, a.data.shape))

    return _make(out_data, (a,), backward)


def reduce_mean(a, axis=None, keepdims=False):
    axis = _norm_axis(axis, a.ndim)
    if axis is None:
        count = a.size
    else:
        count = int(np.prod([a.data.shape[ax] for ax in axis]))
    out_data = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(_dtype)
    flop_counter.add(a.size)

    def backward(g):
        gg = g / count
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        a.accumulate_grad(np.broadcast_to(gg, a.data.shape))

    return _make(out_data, (a,), backward)


def reduce_max(a, axis=None, keepdims=False):
    """Max reduction; gradient splits evenly across tied maxima."""
    axis = _norm_axis(axis, a.ndim)
    out_data = a.data.max(axis=axis, keepdims=True)
    mask = (a.data == out_data)
    counts = mask.sum(axis=axis, keepdims=True)

    def backward(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        elif not keepdims and axis is None:
            gg = np.asarray(g).reshape((1,) * a.ndim)
        a.accumulate_grad(mask * (gg / counts))

    data = out_data if keepdims else np.squeeze(out_data, axis=axis) if axis is not None else out_data.reshape(())
    return _make(np.ascontiguousarray(data), (a,), backward)


# ---- dense contractions (float64 accumulation) ------------------------------

def matmul(a, b):
    """Batched matrix product; leading batch dims broadcast."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul requires tensors of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner dims disagree, {a.shape} @ {b.shape}"
        )
    out_data = np.matmul(a.data, b.data)
    flop_counter.add(2 * out_data.size * a.shape[-1])

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), backward)


def linear(x, w, b=None):
    """``y = x @ w.T + b`` with weight of shape (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(
            f"linear: input features {x.shape[-1]} != weight in-features {w.shape[1]}"
        )
    x2 = np.ascontiguousarray(x.data.reshape(-1, x.shape[-1]))
    y = x2 @ w.data.T
    if b is not None:
        y = y + b.data
    out_shape = x.shape[:-1] + (w.shape[0],)
    flop_counter.add(2 * y.size * x.shape[-1])
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[0])
        if x.requires_grad:
            x.accumulate_grad((g2 @ w.data).reshape(x.shape))
        if w.requires_grad:
            w.accumulate_grad(g2.T @ x2)
        if b is not None and b.requires_grad:
            b.accumulate_grad(g2.sum(axis=0, dtype=np.float64))

    return _make(y.reshape(out_shape), parents, backward)


def _conv_out_dim(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _im2col(data, k, stride, padding):
    """Columns laid out (N, C*k*k, Ho*Wo): k*k contiguous slice copies, and
    the GEMM w2 @ col lands directly in NCHW order with no transposes."""
    n, c, h, w = data.shape
    ho = _conv_out_dim(h, k, stride, padding)
    wo = _conv_out_dim(w, k, stride, padding)
    if padding > 0:
        data = np.pad(data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if k == 1 and stride == 1:
        return data.reshape(n, c, ho * wo), ho, wo
    col = np.empty((n, c, k, k, ho, wo), dtype=data.dtype)
    for i in range(k):
        for j in range(k):
            col[:, :, i, j] = data[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return col.reshape(n, c * k * k, ho * wo), ho, wo


def _check_conv_args(x, w, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(
            f"conv2d expects NCHW input and OIkk weight, got {x.shape} and {w.shape}"
        )
    if w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d kernels must be square, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"conv2d: input has {x.shape[1]} channels but weight expects {w.shape[1]}"
        )
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} padding={padding}")
    ho = _conv_out_dim(x.shape[2], w.shape[2], stride, padding)
    wo = _conv_out_dim(x.shape[3], w.shape[2], stride, padding)
    if ho <= 0 or wo <= 0:
        raise DimensionError(
            f"conv2d: non-positive output dims ({ho}, {wo}) for input {x.shape} "
            f"kernel {w.shape[2]} stride {stride} padding {padding}"
        )
    return ho, wo


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D convolution via im2col + GEMM.

    x: (N, C, H, W); w: (O, C, k, k); b: (O,) or None. Columns are kept on
    the tape and reused for the weight gradient.
    """
    ho, wo = _check_conv_args(x, w, stride, padding)
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    col, _, _ = _im2col(x.data, k, stride, padding)
    w2 = w.data.reshape(o, -1)
    y = np.matmul(w2, col)  # (n, o, ho*wo)
    if b is not None:
        y = y + b.data[None, :, None]
    out_data = y.reshape(n, o, ho, wo)
    flop_counter.add(2 * n * ho * wo * o * c * k * k)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g3 = g.reshape(n, o, ho * wo)
        if w.requires_grad:
            w.accumulate_grad(np.matmul(g3, col.swapaxes(1, 2)).sum(axis=0).reshape(w.shape))
        if b is not None and b.requires_grad:
            b.accumulate_grad(g.sum(axis=(0, 2, 3), dtype=np.float64))
        if x.requires_grad:
            if stride == 1 and o < c:
                # transposed-conv route: much cheaper when the output is
                # narrower than the input (e.g. a wide-to-RGB tail conv)
                wf = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                gcol, _, _ = _im2col(np.ascontiguousarray(g), k, 1, k - 1 - padding)
                gx = np.matmul(wf.reshape(c, -1), gcol).reshape(n, c, h, wd)
            else:
                dwin = np.matmul(w2.T, g3).reshape(n, c, k, k, ho, wo)
                hp, wp = h + 2 * padding, wd + 2 * padding
                gx = np.zeros((n, c, hp, wp), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dwin[:, :, i, j]
                if padding > 0:
                    gx = gx[:, :, padding : padding + h, padding : padding + wd]
            x.accumulate_grad(np.ascontiguousarray(gx))

    return _make(out_data, parents, backward)


def conv2d_naive(x, w, b=None, stride=1, padding=0):
    """Direct convolution looping kernel taps; reference for the GEMM path.

    Forward only (no tape); accumulates in float64. On inputs whose
    products and partial sums are exactly representable (small power-of-two
    grids) this matches :func:`conv2d` bitwise in any summation order.
    """
    ho, wo = _check_conv_args(x, w, stride, padding)
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = x.data.astype(np.float64)
    if padding > 0:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    w64 = w.data.astype(np.float64)
    acc = np.zeros((n, o, ho, wo), dtype=np.float64)
    for ci in range(c):
        for i in range(k):
            for j in range(k):
                patch = xp[:, ci, i : i + stride * ho : stride, j : j + stride * wo : stride]
                acc += patch[:, None, :, :] * w64[None, :, ci, i, j, None, None]
    if b is not None:
        acc += b.data.astype(np.float64)[None, :, None, None]
    return Tensor(acc.astype(_dtype))


def batchnorm2d(x, gamma, beta, running_mean, running_var, momentum=0.1, eps=1e-5, training=True):
    """Per-channel batch normalization over (N, H, W).

    ``running_mean`` / ``running_var`` are plain float32 numpy buffers,
    updated in place in training mode.
    """
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects NCHW input, got shape {x.shape}")
    c = x.shape[1]
    for name, arr in (("gamma", gamma.data), ("beta", beta.data),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise DimensionError(f"batchnorm2d: {name} has shape {arr.shape}, expected ({c},)")
    flop_counter.add(x.size * 2)

    if training:
        mean = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        var = x.data.var(axis=(0, 2, 3), dtype=np.float64)
        m = x.shape[0] * x.shape[2] * x.shape[3]
        running_mean *= 1.0 - momentum
        running_mean += (momentum * mean).astype(np.float32)
        if m > 1:  # running var uses the unbiased estimate
            running_var *= 1.0 - momentum
            running_var += (momentum * var * m / (m - 1)).astype(np.float32)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = ((x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]).astype(_dtype)
        out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

        def backward(g):
            if gamma.requires_grad:
                gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3), dtype=np.float64))
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=(0, 2, 3), dtype=np.float64))
            if x.requires_grad:
                gh = (g * gamma.data[None, :, None, None]).astype(np.float64)
                sum_gh = gh.sum(axis=(0, 2, 3), keepdims=True)
                sum_gh_xhat = (gh * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (gh - sum_gh / m - xhat * (sum_gh_xhat / m)) * inv_std[None, :, None, None]
                x.accumulate_grad(gx)

        return _make(out_data.astype(_dtype), (x, gamma, beta), backward)

    inv_std = (1.0 / np.sqrt(running_var.astype(np.float64) + eps)).astype(_dtype)
    xhat = (x.data - running_mean[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3), dtype=np.float64))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3), dtype=np.float64))
        if x.requires_grad:
            x.accumulate_grad(g * (gamma.data * inv_std)[None, :, None, None])

    return _make(out_data, (x, gamma, beta), backward)


# ---- spatial ops -----------------------------------------------------------

def maxpool2d(x, k, stride=None, padding=0):
    """Max pooling; padded cells are -inf and can never win."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects NCHW input, got shape {x.shape}")
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    ho = _conv_out_dim(h, k, stride, padding)
    wo = _conv_out_dim(w, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"maxpool2d: non-positive output dims for input {x.shape}")
    data = x.data
    if padding > 0:
        data = np.pad(data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                      constant_values=-np.inf)
    sn, sc, sh, sw = data.strides
    win = np.lib.stride_tricks.as_strided(
        data,
        shape=(n, c, ho, wo, k, k),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out_data = np.ascontiguousarray(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0])
    flop_counter.add(n * c * ho * wo * k * k)
    hp, wp = h + 2 * padding, w + 2 * padding

    def backward(g):
        gi, gj = np.divmod(arg, k)
        oy, ox = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
        iy = oy[None, None] * stride + gi
        ix = ox[None, None] * stride + gj
        gx = np.zeros((n, c, hp, wp), dtype=g.dtype)
        nn, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        np.add.at(gx, (nn[..., None, None], cc[..., None, None], iy, ix), g)
        if padding > 0:
            gx = gx[:, :, padding : padding + h, padding : padding + w]
        x.accumulate_grad(np.ascontiguousarray(gx))

    return _make(out_data, (x,), backward)


def upsample_nearest(x, factor):
    if x.ndim != 4:
        raise DimensionError(f"upsample_nearest expects NCHW input, got shape {x.shape}")
    f = int(factor)
    out_data = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        x.accumulate_grad(
            g.reshape(n, c, h, f, w, f).sum(axis=(3, 5), dtype=np.float64)
        )

    return _make(out_data, (x,), backward)


def space_to_depth(x, r=2):
    """(N, C, H, W) -> (N, C*r*r, H/r, W/r).

    Output channel ``c*r*r + dy*r + dx`` holds input channel ``c`` sampled at
    subpixel (dy, dx), i.e. blocks ordered top-left, top-right, bottom-left,
    bottom-right for r=2. Exact inverse of :func:`pixel_shuffle`.
    """
    n, c, h, w = _expect_nchw(x, "space_to_depth")
    if h % r or w % r:
        raise DimensionError(f"space_to_depth: spatial dims {h}x{w} not divisible by r={r}")
    ho, wo = h // r, w // r
    out_data = np.ascontiguousarray(
        x.data.reshape(n, c, ho, r, wo, r).transpose(0, 1, 3, 5, 2, 4)
    ).reshape(n, c * r * r, ho, wo)

    def backward(g):
        gx = np.ascontiguousarray(
            g.reshape(n, c, r, r, ho, wo).transpose(0, 1, 4, 2, 5, 3)
        ).reshape(n, c, h, w)
        x.accumulate_grad(gx)

    return _make(out_data, (x,), backward)


def pixel_shuffle(x, r=2):
    """(N, C*r*r, H, W) -> (N, C, H*r, W*r); inverse of :func:`space_to_depth`."""
    n, c, h, w = _expect_nchw(x, "pixel_shuffle")
    if c % (r * r):
        raise DimensionError(f"pixel_shuffle: channels {c} not divisible by r^2={r * r}")
    co = c // (r * r)
    out_data = np.ascontiguousarray(
        x.data.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    ).reshape(n, co, h * r, w * r)

    def backward(g):
        gx = np.ascontiguousarray(
            g.reshape(n, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4)
        ).reshape(n, c, h, w)
        x.accumulate_grad(gx)

    return _make(out_data, (x,), backward)


def _expect_nchw(x, opname):
    if x.ndim != 4:
        raise DimensionError(f"{opname} expects NCHW input, got shape {x.shape}")
    return x.shape


# ---- normalization / attention helpers --------------------------------------

def softmax(x, axis=-1):
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=axis, keepdims=True)
    flop_counter.add(x.size * 5)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x.accumulate_grad((y * (g - dot)).astype(np.float32))

    return _make(y.astype(_dtype), (x,), backward)


def layernorm(x, axis=-1, eps=1e-5):
    """Normalize to zero mean / unit variance along one axis (no affine)."""
    axis = axis % x.ndim
    n = x.shape[axis]
    mean = x.data.mean(axis=axis, keepdims=True, dtype=np.float64)
    var = x.data.var(axis=axis, keepdims=True, dtype=np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((x.data - mean) * inv_std).astype(_dtype)
    flop_counter.add(x.size * 4)

    def backward(g):
        g64 = g.astype(np.float64)
        mean_g = g64.mean(axis=axis, keepdims=True)
        mean_gx = (g64 * xhat).mean(axis=axis, keepdims=True)
        gx = (g64 - mean_g - xhat * mean_gx) * inv_std
        x.accumulate_grad(gx)

    return _make(xhat, (x,), backward)


def bce_with_logits(x, target, reduction="mean"):
    """Numerically stable binary cross-entropy on raw logits.

    ``target`` is a plain array (or Tensor treated as constant).
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=_dtype)
    if t.shape != x.shape:
        raise DimensionError(f"bce_with_logits: target shape {t.shape} != logits shape {x.shape}")
    z = x.data
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    flop_counter.add(x.size * 6)
    if reduction == "mean":
        out_data = np.asarray(loss.mean(dtype=np.float64), dtype=_dtype)
        scale = 1.0 / x.size
    elif reduction == "sum":
        out_data = np.asarray(loss.sum(dtype=np.float64), dtype=_dtype)
        scale = 1.0
    elif reduction == "none":
        out_data = loss.astype(_dtype)
        scale = None
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g):
        s = 1.0 / (1.0 + np.exp(-z))
        if scale is None:
            x.accumulate_grad((s - t) * g)
        else:
            x.accumulate_grad((s - t) * (float(g.reshape(-1)[0]) * scale))

    return _make(out_data, (x,), backward)


# ---- finite-difference checking ---------------------------------------------

def grad_check(f, x, eps=1e-3):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor. Error per element is
    ``|analytic - cd| / max(|analytic|, |cd|, 1e-6)``. Both sides are
    evaluated under :class:`double_precision` so the comparison measures the
    backward formulas, not float32 rounding.
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    with double_precision():
        xd = Tensor(x.data.astype(np.float64), requires_grad=True)
        y = f(xd)
        if y.data.size != 1:
            raise DimensionError("grad_check requires a scalar-valued function")
        if not np.isfinite(y.data).all():
            raise EvaluationError("function produced a non-finite value at x")
        y.backward()
        analytic = np.zeros_like(xd.data) if xd.grad is None else xd.grad.copy()

        flat = xd.data.reshape(-1)
        cd = np.zeros(flat.shape, dtype=np.float64)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i].copy()
                flat[i] = orig + eps
                y_hi = float(f(xd).data)
                flat[i] = orig - eps
                y_lo = float(f(xd).data)
                flat[i] = orig
                cd[i] = (y_hi - y_lo) / (2.0 * eps)
    if not np.isfinite(cd).all():
        raise EvaluationError("finite differencing produced a non-finite value")
    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(cd)), 1e-6)
    return float(np.max(np.abs(a - cd) / denom))
