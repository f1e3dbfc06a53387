"""Dense tensors with a dynamic reverse-mode autodiff tape.

Everything is backed by numpy arrays: float32 for training and inference,
float64 for gradient checking (ops are dtype-generic, results follow numpy
promotion). A tensor produced by an operation records its parents and a
backward closure; calling ``backward()`` on a scalar loss walks the tape
once in reverse topological order and then frees it, so a second backward
on the same graph raises.

Canonical image layout is channels x height x width with an optional batch
dimension in front; spatial ops accept both 3-D and 4-D tensors.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

DEFAULT_DTYPE = np.float32

# Probabilities entering the cross-entropy are clamped to this band so a
# saturated sigmoid can never produce log(0).
BCE_CLIP = 1e-7


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class TapeError(RuntimeError):
    """Invalid use of the autodiff tape (freed graph, non-scalar loss, ...)."""


_grad_enabled = True

# Sentinel stored in ``_backward`` once a graph has been consumed.
_FREED = object()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data).astype(dtype, copy=False)
    # Arrays and numpy scalars keep their float precision; plain Python
    # input lands in float32.
    if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32,
                                                                     np.float64):
        return np.asarray(data)
    return np.asarray(data, dtype=DEFAULT_DTYPE)


class Tensor:
    """N-dimensional real array, optionally participating in the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("cannot build a Tensor from a Tensor; use .data")
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return (f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad})")

    # Operator sugar; all real work happens in the module-level ops.
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

    def backward(self) -> None:
        """Assign gradients to every requires_grad tensor reachable from here.

        The loss must be a scalar produced by recorded operations. Gradients
        accumulate (+=) across multiple uses of a tensor within the graph and
        across successive backward calls on *different* graphs; the graph
        walked here is freed afterwards, so a repeated backward raises.
        """
        if self._backward is _FREED:
            raise TapeError("backward already ran on this graph; the tape was freed")
        if self.data.ndim != 0:
            raise TapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad or not self._parents:
            raise TapeError("backward on a tensor with no recorded operation graph")

        order = _toposort(self)
        self.grad = np.ones((), dtype=self.data.dtype)
        for node in reversed(order):
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g
            node._parents = ()
            node._backward = _FREED


def _toposort(root: Tensor) -> list:
    """Iterative postorder over interior (op-produced) nodes."""
    order: list = []
    visited: set = set()
    stack: list = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited or not node._parents:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor(data, requires_grad=_grad_enabled and any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

PaddingSpec = Union[str, int]


@dataclass
class ConvParams:
    """2-D convolution parameters: kernel is out_ch x in_ch x kh x kw."""

    kernel: Tensor
    bias: Tensor
    stride: int = 1
    dilation: int = 1
    padding: PaddingSpec = "same"

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError(f"conv kernel must be 4-D, got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(f"conv bias {self.bias.shape} does not match "
                             f"{self.kernel.shape[0]} output channels")
        if self.stride < 1 or self.dilation < 1:
            raise ValueError("stride and dilation must be >= 1")


@dataclass
class DenseParams:
    """Affine map parameters: weight is out_dim x in_dim."""

    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"inconsistent dense shapes {self.weight.shape} / {self.bias.shape}")


@dataclass
class BatchNormParams:
    """Batch normalization state; mode selects batch vs running statistics."""

    scale: Tensor
    shift: Tensor
    running_mean: Tensor
    running_var: Tensor
    epsilon: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        if np.any(self.running_var.data < 0):
            raise ValueError("running variance must be non-negative")


def init_conv(rng: np.random.Generator, out_channels: int, in_channels: int,
              kernel_size: int, stride: int = 1, dilation: int = 1,
              padding: PaddingSpec = "same") -> ConvParams:
    """Fan-in-scaled uniform kernel, zero bias."""
    fan_in = in_channels * kernel_size * kernel_size
    limit = 1.0 / np.sqrt(fan_in)
    kernel = rng.uniform(-limit, limit,
                         (out_channels, in_channels, kernel_size, kernel_size))
    return ConvParams(
        kernel=Tensor(kernel.astype(np.float32), requires_grad=True),
        bias=Tensor(np.zeros(out_channels, dtype=np.float32), requires_grad=True),
        stride=stride, dilation=dilation, padding=padding)


def init_dense(rng: np.random.Generator, out_dim: int, in_dim: int) -> DenseParams:
    limit = 1.0 / np.sqrt(in_dim)
    weight = rng.uniform(-limit, limit, (out_dim, in_dim))
    return DenseParams(
        weight=Tensor(weight.astype(np.float32), requires_grad=True),
        bias=Tensor(np.zeros(out_dim, dtype=np.float32), requires_grad=True))


def init_batch_norm(channels: int, epsilon: float = 1e-5,
                    momentum: float = 0.1) -> BatchNormParams:
    return BatchNormParams(
        scale=Tensor(np.ones(channels, dtype=np.float32), requires_grad=True),
        shift=Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True),
        running_mean=Tensor(np.zeros(channels, dtype=np.float32)),
        running_var=Tensor(np.ones(channels, dtype=np.float32)))


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", None))
    b = _coerce(b, a.dtype)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    a_shape, b_shape = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

    return _result(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", None))
    b = _coerce(b, a.dtype)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    a_shape, b_shape = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

    return _result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", None))
    b = _coerce(b, a.dtype)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    a_data, b_data = a.data, b.data

    def backward(g):
        return _unbroadcast(g * b_data, a_data.shape), _unbroadcast(g * a_data, b_data.shape)

    return _result(out, (a, b), backward)


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    """Broadcasting elementwise combination; op is "add" or "mul"."""
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity; kind is "relu" or "sigmoid"."""
    xd = x.data
    if kind == "relu":
        out = np.maximum(xd, 0)

        def backward(g):
            return (g * (xd > 0),)

    elif kind == "sigmoid":
        out = _sigmoid(xd)

        def backward(g):
            return (g * out * (1 - out),)

    else:
        raise ValueError(f"unknown activation {kind!r}")
    return _result(out, (x,), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# dense / convolution
# ---------------------------------------------------------------------------

def dense(x: Tensor, params: DenseParams) -> Tensor:
    """Affine map y = x W^T + b for a vector or a batch of vectors."""
    weight, bias = params.weight, params.bias
    if x.ndim not in (1, 2):
        raise ShapeError(f"dense expects 1-D or 2-D input, got {x.shape}")
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"dense input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T + bias.data
    x_data, w_data = x.data, weight.data

    def backward(g):
        g2 = g if g.ndim == 2 else g[None, :]
        x2 = x_data if x_data.ndim == 2 else x_data[None, :]
        return g @ w_data, g2.T @ x2, g2.sum(axis=0)

    return _result(out, (x, weight, bias), backward)


def effective_span(kernel_size: int, dilation: int) -> int:
    """Receptive span of a dilated kernel along one axis."""
    return (kernel_size - 1) * dilation + 1


def same_padding(kernel_size: int, dilation: int) -> tuple:
    """Zero-padding split preserving extent at stride 1; extra pixel goes high."""
    total = dilation * (kernel_size - 1)
    low = total // 2
    return low, total - low


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """2-D convolution (cross-correlation) via im2col over C,H,W or N,C,H,W input.

    Output extent follows the standard arithmetic
    ``(extent + pad_total - span) // stride + 1`` with
    ``span = (k - 1) * dilation + 1``.
    """
    kernel, bias = params.kernel, params.bias
    stride, dilation = params.stride, params.dilation
    xd = x.data
    squeeze = xd.ndim == 3
    if squeeze:
        x4 = xd[None]
    elif xd.ndim == 4:
        x4 = xd
    else:
        raise ShapeError(f"conv2d expects 3-D or 4-D input, got {xd.shape}")

    n, cin, h, w = x4.shape
    cout, k_cin, kh, kw = kernel.data.shape
    if cin != k_cin:
        raise ShapeError(f"input {x.shape} has {cin} channels but kernel "
                         f"{kernel.shape} expects {k_cin}")

    if params.padding == "same":
        pl_h, ph_h = same_padding(kh, dilation)
        pl_w, ph_w = same_padding(kw, dilation)
    else:
        pl_h = ph_h = pl_w = ph_w = int(params.padding)

    span_h = effective_span(kh, dilation)
    span_w = effective_span(kw, dilation)
    ho = (h + pl_h + ph_h - span_h) // stride + 1
    wo = (w + pl_w + ph_w - span_w) // stride + 1
    if h + pl_h + ph_h < span_h or w + pl_w + ph_w < span_w or ho <= 0 or wo <= 0:
        raise ShapeError(f"kernel span {span_h}x{span_w} yields empty output on padded "
                         f"input {h + pl_h + ph_h}x{w + pl_w + ph_w}")

    xp = np.pad(x4, ((0, 0), (0, 0), (pl_h, ph_h), (pl_w, ph_w)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, ::dilation, ::dilation]  # N,C,Ho,Wo,kh,kw
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(n * ho * wo, cin * kh * kw)
    kmat = kernel.data.reshape(cout, -1)

    out = cols @ kmat.T
    out += bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    padded_shape = xp.shape

    def backward(g):
        g4 = g[None] if squeeze else g
        gmat = np.ascontiguousarray(g4.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        gbias = g4.sum(axis=(0, 2, 3))
        gkernel = (gmat.T @ cols).reshape(cout, cin, kh, kw)
        gcols = (gmat @ kmat).reshape(n, ho, wo, cin, kh, kw)
        gxp = np.zeros(padded_shape, dtype=g4.dtype)
        for i in range(kh):
            hi = i * dilation
            for j in range(kw):
                wj = j * dilation
                gxp[:, :, hi:hi + (ho - 1) * stride + 1:stride,
                    wj:wj + (wo - 1) * stride + 1:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pl_h:pl_h + h, pl_w:pl_w + w]
        return (gx[0] if squeeze else gx), gkernel, gbias

    return _result(out[0] if squeeze else out, (x, kernel, bias), backward)


# ---------------------------------------------------------------------------
# pooling / resampling
# ---------------------------------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial extent; keeps a 1x1 spatial footprint."""
    xd = x.data
    if xd.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool expects 3-D or 4-D input, got {xd.shape}")
    if xd.shape[-1] == 0 or xd.shape[-2] == 0:
        raise ShapeError("empty spatial extent")
    area = xd.shape[-1] * xd.shape[-2]
    out = xd.mean(axis=(-2, -1), keepdims=True)
    in_shape = xd.shape

    def backward(g):
        return (np.broadcast_to(g / area, in_shape),)

    return _result(out, (x,), backward)


def max_pool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties go to the first index in row-major
    window order so gradients are reproducible."""
    xd = x.data
    squeeze = xd.ndim == 3
    x4 = xd[None] if squeeze else xd
    if x4.ndim != 4:
        raise ShapeError(f"max_pool2d expects 3-D or 4-D input, got {xd.shape}")
    n, c, h, w = x4.shape
    if h % window or w % window:
        raise ShapeError(f"spatial extent {h}x{w} is not divisible by window {window}")
    ho, wo = h // window, w // window
    tiles = x4.reshape(n, c, ho, window, wo, window)
    tiles = tiles.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, window * window)
    argmax = tiles.argmax(axis=-1)
    out4 = np.take_along_axis(tiles, argmax[..., None], axis=-1)[..., 0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gtiles = np.zeros_like(tiles)
        np.put_along_axis(gtiles, argmax[..., None], g4[..., None], axis=-1)
        gx = gtiles.reshape(n, c, ho, wo, window, window)
        gx = gx.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx[0] if squeeze else gx,)

    return _result(out4[0] if squeeze else out4, (x,), backward)


def upsample2d(x: Tensor, factor: int, mode: str = "nearest") -> Tensor:
    """Nearest-neighbor upsampling; each pixel becomes a factor x factor tile."""
    if mode != "nearest":
        raise ValueError(f"unsupported upsample mode {mode!r}")
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    xd = x.data
    if xd.ndim < 2:
        raise ShapeError(f"upsample2d needs at least 2 dims, got {xd.shape}")
    out = xd.repeat(factor, axis=-2).repeat(factor, axis=-1)
    in_shape = xd.shape

    def backward(g):
        lead = g.shape[:-2]
        g6 = g.reshape(*lead, in_shape[-2], factor, in_shape[-1], factor)
        return (g6.sum(axis=(-3, -1)),)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    in_shape = x.data.shape

    def backward(g):
        return (g.reshape(in_shape),)

    return _result(out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# reductions / losses
# ---------------------------------------------------------------------------

def reduce_sum(x: Tensor) -> Tensor:
    out = x.data.sum()
    in_shape = x.data.shape

    def backward(g):
        return (np.broadcast_to(g, in_shape),)

    return _result(out, (x,), backward)


def reduce_mean(x: Tensor) -> Tensor:
    size = x.data.size
    out = x.data.mean()
    in_shape = x.data.shape

    def backward(g):
        return (np.broadcast_to(g / size, in_shape),)

    return _result(out, (x,), backward)


def batch_norm(x: Tensor, params: BatchNormParams) -> Tensor:
    """Normalize per feature over the batch (2-D input) or per channel over
    batch and space (4-D input).

    Train mode uses batch statistics (biased variance) and updates the
    running buffers in place by ``momentum``; eval mode applies the running
    statistics. The scale/shift gradients are defined in both modes.
    """
    xd = x.data
    if xd.ndim == 2:
        axes = (0,)
        view = (1, -1)
    elif xd.ndim == 4:
        axes = (0, 2, 3)
        view = (1, -1, 1, 1)
    else:
        raise ShapeError(f"batch_norm expects 2-D or 4-D input, got {xd.shape}")
    channels = xd.shape[1]
    if params.scale.shape != (channels,):
        raise ShapeError(f"batch_norm input has {channels} channels but params carry "
                         f"{params.scale.shape[0]}")

    gamma = params.scale.data.reshape(view)
    delta = params.shift.data.reshape(view)

    if params.mode == "train":
        mu = xd.mean(axis=axes, keepdims=True)
        var = xd.var(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + params.epsilon)
        xhat = (xd - mu) * inv
        m = params.momentum
        rm, rv = params.running_mean.data, params.running_var.data
        params.running_mean.data = ((1 - m) * rm + m * mu.reshape(-1)).astype(rm.dtype, copy=False)
        params.running_var.data = ((1 - m) * rv + m * var.reshape(-1)).astype(rv.dtype, copy=False)
        count = xd.size // channels

        def backward(g):
            dgamma = (g * xhat).sum(axis=axes)
            dshift = g.sum(axis=axes)
            gmean = g.sum(axis=axes, keepdims=True) / count
            gxhat_mean = (g * xhat).sum(axis=axes, keepdims=True) / count
            dx = gamma * inv * (g - gmean - xhat * gxhat_mean)
            return dx, dgamma, dshift

    elif params.mode == "eval":
        inv = 1.0 / np.sqrt(params.running_var.data.reshape(view) + params.epsilon)
        xhat = (xd - params.running_mean.data.reshape(view)) * inv

        def backward(g):
            dgamma = (g * xhat).sum(axis=axes)
            dshift = g.sum(axis=axes)
            return g * gamma * inv, dgamma, dshift

    else:
        raise ValueError(f"batch_norm mode must be 'train' or 'eval', got {params.mode!r}")

    out = gamma * xhat + delta
    return _result(out, (x, params.scale, params.shift), backward)


def bce_loss(prediction: Tensor, target) -> Tensor:
    """Mean binary cross-entropy over all elements.

    Predictions are probabilities (post-sigmoid) and are clamped to
    ``[BCE_CLIP, 1 - BCE_CLIP]`` before the logs; the clamp has zero gradient
    outside the band, which keeps every output finite.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    t = t.astype(prediction.dtype, copy=False)
    if prediction.shape != t.shape:
        raise ShapeError(f"prediction {prediction.shape} and target {t.shape} differ")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("bce_loss target must contain only 0 and 1")

    pd = prediction.data
    p = np.clip(pd, BCE_CLIP, 1.0 - BCE_CLIP)
    count = p.size
    out = -(t * np.log(p) + (1 - t) * np.log1p(-p)).mean()
    inside = (pd > BCE_CLIP) & (pd < 1.0 - BCE_CLIP)

    def backward(g):
        gp = g * ((1 - t) / (1 - p) - t / p) / count
        return (np.where(inside, gp, 0.0),)

    return _result(out, (prediction,), backward)
