"""Dense NCHW tensor primitives with hand-written backward passes.

Feature maps are plain ``numpy`` arrays in batch-channel-height-width layout.
Trainable state lives in :class:`Parameter`, which pairs a value array with a
same-shaped gradient buffer. Every forward primitive has a matching backward
function; there is no autodiff graph.

Two precision modes are supported: 32-bit (default, fast) and 64-bit (used by
the finite-difference gradient checks). Switch with :func:`set_precision` or
the :func:`precision` context manager.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import _kernels

_DTYPES = {32: np.float32, 64: np.float64}
_dtype: type = np.float32
_debug = False


class ShapeError(ValueError):
    """Raised when an operand has the wrong shape; names the offending dimension."""

    def __init__(self, op: str, dim: str, expected, got):
        super().__init__(f"{op}: {dim} mismatch (expected {expected}, got {got})")
        self.op = op
        self.dim = dim
        self.expected = expected
        self.got = got


class NumericalError(FloatingPointError):
    pass


def set_precision(bits: int) -> None:
    global _dtype
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _dtype = _DTYPES[bits]


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    global _dtype
    prev = _dtype
    set_precision(bits)
    try:
        yield
    finally:
        _dtype = prev


def set_debug(flag: bool) -> None:
    """In debug mode, layer boundaries reject NaN/Inf values."""
    global _debug
    _debug = bool(flag)


def check_finite(name: str, x: np.ndarray) -> np.ndarray:
    if _debug and not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values at {name}")
    return x


def asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=_dtype)


class Parameter:
    """A trainable array with its gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.array(data, dtype=_dtype)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad.fill(0)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.data.shape}, dtype={self.data.dtype})"


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    dilation: int = 1
    groups: int = 1
    padding: int | None = None

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )
        if self.padding is None:
            # "same" padding for stride 1
            object.__setattr__(self, "padding", self.dilation * (self.kernel_size - 1) // 2)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        k = self.kernel_size
        return (self.out_channels, self.in_channels // self.groups, k, k)

    @property
    def span(self) -> int:
        return self.dilation * (self.kernel_size - 1) + 1

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.span) // self.stride + 1
        wo = (w + 2 * self.padding - self.span) // self.stride + 1
        return ho, wo


def _check_conv(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> None:
    if x.ndim != 4:
        raise ShapeError("conv2d", "input rank", 4, x.ndim)
    if x.shape[1] != spec.in_channels:
        raise ShapeError("conv2d", "input channels", spec.in_channels, x.shape[1])
    if tuple(w.shape) != spec.weight_shape:
        raise ShapeError("conv2d", "weight shape", spec.weight_shape, tuple(w.shape))


def pad_hw(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _windows(xp: np.ndarray, k: int, dilation: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Read-only strided view of shape (N, C, Ho, Wo, k, k) over a padded input."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, ho, wo, k, k),
        strides=(sn, sc, sh * stride, sw * stride, sh * dilation, sw * dilation),
        writeable=False,
    )


def _tap(xp: np.ndarray, i: int, j: int, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    """Slice of the padded input seen by kernel tap (i, j) at every output position."""
    d, s = spec.dilation, spec.stride
    return xp[:, :, i * d : i * d + s * (ho - 1) + 1 : s, j * d : j * d + s * (wo - 1) + 1 : s]


def _im2col(x: np.ndarray, spec: ConvSpec) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    ho, wo = spec.output_size(h, w)
    k = spec.kernel_size
    if k == 1 and spec.padding == 0:
        cols = x[:, :, :: spec.stride, :: spec.stride].transpose(0, 2, 3, 1).reshape(n * ho * wo, c)
        return cols, ho, wo
    win = _windows(pad_hw(x, spec.padding), k, spec.dilation, spec.stride, ho, wo)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _col2im(gcols: np.ndarray, x_shape, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = x_shape
    k, p = spec.kernel_size, spec.padding
    g = gcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=gcols.dtype)
    for i in range(k):
        for j in range(k):
            _tap(gxp, i, j, spec, ho, wo)[...] += g[..., i, j]
    return gxp[:, :, p : p + h, p : p + w] if p else gxp


def conv2d_forward(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Cross-correlation with stride, dilation, zero padding and channel groups."""
    _check_conv(x, w, spec)
    return _conv_forward(x, w, spec)[0]


def _conv_forward(x, w, spec):
    n = x.shape[0]
    if spec.groups == 1:
        cols, ho, wo = _im2col(x, spec)
        out = cols @ w.reshape(spec.out_channels, -1).T
        return out.reshape(n, ho, wo, spec.out_channels).transpose(0, 3, 1, 2), cols
    ho, wo = spec.output_size(x.shape[2], x.shape[3])
    if spec.groups == spec.in_channels == spec.out_channels:
        dt = np.result_type(x, w)
        out = _kernels.dw_forward(
            np.ascontiguousarray(x, dt), np.ascontiguousarray(w, dt), spec.stride, spec.dilation, spec.padding, ho, wo
        )
        return out, None
    cg, og = spec.in_channels // spec.groups, spec.out_channels // spec.groups
    sub = ConvSpec(cg, og, spec.kernel_size, spec.stride, spec.dilation, 1, spec.padding)
    parts = [
        _conv_forward(x[:, g * cg : (g + 1) * cg], w[g * og : (g + 1) * og], sub)[0]
        for g in range(spec.groups)
    ]
    return np.concatenate(parts, axis=1), None


def conv2d_backward(
    grad_out: np.ndarray, saved_input: np.ndarray, weights: np.ndarray, spec: ConvSpec, cols=None
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d_forward` w.r.t. its input and weights.

    ``cols`` may carry the im2col matrix cached by the forward pass (groups=1
    only) to avoid recomputing it.
    """
    _check_conv(saved_input, weights, spec)
    x, w = saved_input, weights
    n = x.shape[0]
    ho, wo = spec.output_size(x.shape[2], x.shape[3])
    if grad_out.shape != (n, spec.out_channels, ho, wo):
        raise ShapeError("conv2d_backward", "grad_out shape", (n, spec.out_channels, ho, wo), grad_out.shape)
    if spec.groups == 1:
        if cols is None:
            cols = _im2col(x, spec)[0]
        g2 = grad_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, spec.out_channels)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = g2 @ w.reshape(spec.out_channels, -1)
        if spec.kernel_size == 1 and spec.padding == 0:
            gx = np.zeros_like(x, dtype=gcols.dtype)
            gx[:, :, :: spec.stride, :: spec.stride] = gcols.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
            return gx, gw
        return _col2im(gcols, x.shape, spec, ho, wo), gw
    if spec.groups == spec.in_channels == spec.out_channels:
        dt = np.result_type(grad_out, x, w)
        return _kernels.dw_backward(
            np.ascontiguousarray(grad_out, dt),
            np.ascontiguousarray(x, dt),
            np.ascontiguousarray(w, dt),
            spec.stride,
            spec.dilation,
            spec.padding,
        )
    cg, og = spec.in_channels // spec.groups, spec.out_channels // spec.groups
    sub = ConvSpec(cg, og, spec.kernel_size, spec.stride, spec.dilation, 1, spec.padding)
    gxs, gws = [], []
    for g in range(spec.groups):
        gx, gw = conv2d_backward(
            grad_out[:, g * og : (g + 1) * og], x[:, g * cg : (g + 1) * cg], w[g * og : (g + 1) * og], sub
        )
        gxs.append(gx)
        gws.append(gw)
    return np.concatenate(gxs, axis=1), np.concatenate(gws, axis=0)


# --------------------------------------------------------------------------
# pooling (3x3 window, padding 1)
# --------------------------------------------------------------------------

_POOL = ConvSpec(1, 1, kernel_size=3, padding=1)


def _pool_spec(stride: int) -> ConvSpec:
    return _POOL if stride == 1 else ConvSpec(1, 1, kernel_size=3, stride=stride, padding=1)


def _check_pool(x: np.ndarray, stride: int, op: str) -> None:
    if stride not in (1, 2):
        raise ValueError(f"{op}: stride must be 1 or 2, got {stride}")
    if x.ndim != 4:
        raise ShapeError(op, "input rank", 4, x.ndim)
    if x.shape[2] == 0 or x.shape[3] == 0:
        raise ShapeError(op, "spatial size", "non-empty", x.shape[2:])


def _max_argmax(x: np.ndarray, stride: int):
    ho, wo = _pool_spec(stride).output_size(x.shape[2], x.shape[3])
    # ties resolve to the first maximal tap in row-major window order
    out, arg = _kernels.maxpool_forward(np.ascontiguousarray(x), stride, ho, wo)
    return out, arg, ho, wo


def max_pool3x3(x: np.ndarray, stride: int = 1) -> np.ndarray:
    _check_pool(x, stride, "max_pool3x3")
    return _max_argmax(x, stride)[0]


def max_pool3x3_backward(grad_out: np.ndarray, saved_input: np.ndarray, stride: int = 1) -> np.ndarray:
    _, arg, _, _ = _max_argmax(saved_input, stride)
    _, _, h, w = saved_input.shape
    return _kernels.maxpool_backward(np.ascontiguousarray(grad_out), arg, h, w)


def avg_pool3x3(x: np.ndarray, stride: int = 1) -> np.ndarray:
    """3x3 mean pooling; padded zeros count towards the divisor (always 9)."""
    _check_pool(x, stride, "avg_pool3x3")
    ho, wo = _pool_spec(stride).output_size(x.shape[2], x.shape[3])
    return _kernels.avgpool_forward(np.ascontiguousarray(x), stride, ho, wo)


def avg_pool3x3_backward(grad_out: np.ndarray, input_shape, stride: int = 1) -> np.ndarray:
    _, _, h, w = input_shape
    return _kernels.avgpool_backward(np.ascontiguousarray(grad_out), h, w, stride)


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------


class BatchNormState:
    """Per-channel affine parameters plus running statistics."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, affine: bool = True):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.affine = affine
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=_dtype)
        self.running_var = np.ones(channels, dtype=_dtype)


def batch_norm(x: np.ndarray, state: BatchNormState, training: bool):
    """Returns ``(out, cache)``; pass ``cache`` to :func:`batch_norm_backward`."""
    if x.ndim != 4:
        raise ShapeError("batch_norm", "input rank", 4, x.ndim)
    if x.shape[1] != state.channels:
        raise ShapeError("batch_norm", "channels", state.channels, x.shape[1])
    if x.shape[0] == 0:
        raise ShapeError("batch_norm", "batch size", ">0", 0)
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * (m / (m - 1)) if m > 1 else var
        mom = state.momentum
        state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(state.running_var.dtype)
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * state.gamma.data[None, :, None, None] + state.beta.data[None, :, None, None]
    return out.astype(x.dtype, copy=False), (xhat, inv_std, training)


def batch_norm_backward(grad_out: np.ndarray, state: BatchNormState, cache) -> np.ndarray:
    """Returns the input gradient; accumulates gamma/beta gradients into ``state``."""
    xhat, inv_std, training = cache
    if state.affine:
        state.gamma.grad += np.einsum("nchw,nchw->c", grad_out, xhat)
        state.beta.grad += grad_out.sum(axis=(0, 2, 3))
    g = grad_out * state.gamma.data[None, :, None, None]
    if not training:
        return g * inv_std[None, :, None, None]
    m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    g_sum = g.sum(axis=(0, 2, 3))[None, :, None, None]
    gx_sum = np.einsum("nchw,nchw->c", g, xhat)[None, :, None, None]
    return (inv_std[None, :, None, None] / m) * (m * g - g_sum - xhat * gx_sum)


# --------------------------------------------------------------------------
# dense layers, losses, optimisation
# --------------------------------------------------------------------------


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    if x.shape[1] != w.shape[1]:
        raise ShapeError("linear", "in_features", w.shape[1], x.shape[1])
    out = x @ w.T
    return out + b if b is not None else out


def linear_backward(grad_out: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Returns (grad_input, grad_weight, grad_bias)."""
    return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(grad_out: np.ndarray, input_shape) -> np.ndarray:
    n, c, h, w = input_shape
    return np.broadcast_to(grad_out[:, :, None, None] / (h * w), input_shape).copy()


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: Sequence[int]) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of the true class, and its logit gradient."""
    labels = np.asarray(labels, dtype=np.int64)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError("softmax_cross_entropy", "labels", (n,), labels.shape)
    if n and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"label out of range [0, {classes})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp_true = z[np.arange(n), labels] - logsum
    loss = float(-logp_true.mean())
    grad = np.exp(z - logsum[:, None])
    grad[np.arange(n), labels] -= 1
    return loss, grad / n


def sgd_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    momentum_buffers: Sequence[np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """In place: ``v = momentum*v + grad + wd*param``; ``param -= lr*v``."""
    for p, g, v in zip(params, grads, momentum_buffers):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError("sgd_step", "parameter shape", p.shape, (g.shape, v.shape))
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    return lr0 * 0.5 * (1 + math.cos(math.pi * epoch / total_epochs))


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the original norm."""
    total = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            p.grad *= scale
    return total
