"""Forward numerical primitives on NCHW tensors.

All functions here are pure: they validate shapes, compute with numpy,
and return new immutable tensors.  Gradients live in :mod:`egnet.autograd`,
which wraps these same forward routines.

Convolutions use cross-correlation semantics (no kernel flip) and "same"
padding derived from the kernel size: stride-1 output matches the input
spatially, stride-2 output is ``ceil(h/2) x ceil(w/2)``.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ConfigError,
    ContractError,
    DegenerateInputError,
    DimensionError,
    DomainError,
)
from .tensor import Tensor

ZERO = "zero"
REPLICATE = "replicate"
_PAD_MODES = (ZERO, REPLICATE)

BN_EPS = 1e-5
SQRT_EPS = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _check_same_dtype(*arrays: np.ndarray) -> np.dtype:
    dt = arrays[0].dtype
    for a in arrays[1:]:
        if a.dtype != dt:
            raise ContractError(f"mixed dtypes {dt} and {a.dtype}; cast explicitly")
    return dt


def _check_padding(padding: str) -> None:
    if padding not in _PAD_MODES:
        raise ConfigError(f"unknown padding mode {padding!r}")


def _pad2d(a: np.ndarray, p: int, padding: str) -> np.ndarray:
    if p == 0:
        return a
    n, c, h, w = a.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=a.dtype)
    out[:, :, p : p + h, p : p + w] = a
    if padding == REPLICATE:
        out[:, :, :p, p : p + w] = a[:, :, :1, :]
        out[:, :, p + h :, p : p + w] = a[:, :, -1:, :]
        out[:, :, :, :p] = out[:, :, :, p : p + 1]
        out[:, :, :, p + w :] = out[:, :, :, p + w - 1 : p + w]
    return out


def _windows(a: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (n, c, oh, ow, k, k) strided view over the padded array.
    win = sliding_window_view(a, (k, k), axis=(2, 3))
    if stride > 1:
        win = win[:, :, ::stride, ::stride]
    return win


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # Contiguous (n, c, k*k, oh*ow) patch buffer, assembled with k*k plain
    # slice copies; far cheaper than copying a 6-D strided view.
    n, c, hp, wp = xp.shape
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    buf = np.empty((n, c, k, k, oh, ow), dtype=xp.dtype)
    for ki in range(k):
        for kj in range(k):
            buf[:, :, ki, kj] = xp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
    return buf.reshape(n, c, k * k, oh * ow)


def conv2d(x, weight, bias=None, *, stride: int = 1, padding: str = ZERO) -> Tensor:
    """Standard 2-D convolution, ``(n,c_in,h,w) -> (n,c_out,h',w')``."""
    xa, wa = _data(x), _data(weight)
    ba = None if bias is None else _data(bias)
    _check_padding(padding)
    if xa.ndim != 4:
        raise DimensionError(f"conv2d input must be rank-4 NCHW, got rank {xa.ndim}", axis="n")
    if wa.ndim != 4 or wa.shape[2] != wa.shape[3]:
        raise DimensionError(
            f"conv2d weight must be (c_out, c_in, k, k), got {wa.shape}", axis="k"
        )
    k = wa.shape[2]
    if k % 2 == 0:
        raise ConfigError(f"conv2d kernel size must be odd, got {k}")
    if stride not in (1, 2):
        raise ConfigError(f"conv2d stride must be 1 or 2, got {stride}")
    if xa.shape[1] != wa.shape[1]:
        raise DimensionError(
            f"conv2d channel mismatch: input has {xa.shape[1]} channels, "
            f"weight expects {wa.shape[1]}",
            axis="c",
        )
    if ba is not None and ba.shape != (wa.shape[0],):
        raise DimensionError(
            f"conv2d bias must have shape ({wa.shape[0]},), got {ba.shape}", axis="c"
        )
    if ba is None:
        _check_same_dtype(xa, wa)
    else:
        _check_same_dtype(xa, wa, ba)
    return Tensor._wrap(_conv2d_raw(xa, wa, ba, stride, padding))


def _conv2d_raw(xa, wa, ba, stride, padding) -> np.ndarray:
    n, _, h, w = xa.shape
    cout, cin, k, _ = wa.shape
    if k == 1 and stride == 1:
        # Pointwise fast path: one batched matmul, no padding or windows.
        y = np.matmul(wa.reshape(cout, cin), xa.reshape(n, cin, h * w)).reshape(n, cout, h, w)
    else:
        p = (k - 1) // 2
        xp = _pad2d(xa, p, padding)
        oh = (h + 2 * p - k) // stride + 1
        ow = (w + 2 * p - k) // stride + 1
        cols = _im2col(xp, k, stride).reshape(n, cin * k * k, oh * ow)
        y = np.matmul(wa.reshape(cout, cin * k * k), cols).reshape(n, cout, oh, ow)
    if ba is not None:
        y = y + ba[None, :, None, None]
    return np.ascontiguousarray(y)


def depthwise_conv2d(x, kernel, *, stride: int = 1, padding: str = ZERO) -> Tensor:
    """Per-channel convolution.

    ``kernel`` is either ``(c, 1, k, k)`` with one filter per input channel,
    or a single shared ``(k, k)`` filter applied identically to every
    channel (the form used by the fixed classical kernels).
    """
    xa, ka = _data(x), _data(kernel)
    _check_padding(padding)
    if xa.ndim != 4:
        raise DimensionError(f"depthwise input must be rank-4 NCHW, got rank {xa.ndim}", axis="n")
    if ka.ndim == 4:
        if ka.shape[1] != 1 or ka.shape[2] != ka.shape[3]:
            raise DimensionError(f"depthwise kernel must be (c, 1, k, k), got {ka.shape}", axis="k")
        if ka.shape[0] != xa.shape[1]:
            raise DimensionError(
                f"depthwise channel mismatch: input has {xa.shape[1]} channels, "
                f"kernel has {ka.shape[0]}",
                axis="c",
            )
        k = ka.shape[2]
    elif ka.ndim == 2:
        if ka.shape[0] != ka.shape[1]:
            raise DimensionError(f"shared depthwise kernel must be square, got {ka.shape}", axis="k")
        k = ka.shape[0]
    else:
        raise DimensionError(f"depthwise kernel must be rank 2 or 4, got rank {ka.ndim}", axis="k")
    if k % 2 == 0:
        raise ConfigError(f"depthwise kernel size must be odd, got {k}")
    if stride not in (1, 2):
        raise ConfigError(f"depthwise stride must be 1 or 2, got {stride}")
    _check_same_dtype(xa, ka)
    return Tensor._wrap(_depthwise_raw(xa, ka, stride, padding))


def _depthwise_raw(xa, ka, stride, padding) -> np.ndarray:
    k = ka.shape[-1]
    p = (k - 1) // 2
    xp = _pad2d(xa, p, padding)
    shared = ka.ndim == 2
    n, c, hp, wp = xp.shape
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    if k <= 3:
        # Shift-and-accumulate: cheapest for small kernels.
        y = np.zeros((n, c, oh, ow), dtype=xa.dtype)
        for ki in range(k):
            for kj in range(k):
                tap = xp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
                if shared:
                    y += tap * ka[ki, kj]
                else:
                    y += tap * ka[:, 0, ki, kj][None, :, None, None]
        return y
    cols = _im2col(xp, k, stride)  # (n, c, k*k, oh*ow)
    if shared:
        y = np.matmul(ka.reshape(k * k), cols)
    else:
        y = np.matmul(ka.reshape(c, 1, k * k), cols)[:, :, 0]
    return np.ascontiguousarray(y.reshape(n, c, oh, ow))


def conv1d_channels(v, weight) -> Tensor:
    """1-D convolution along the channel axis with zero padding.

    ``v`` is a channel descriptor vector ``(c,)`` or a batch of them
    ``(n, c)``; ``weight`` is ``(k,)`` with odd ``k <= c``.  Output keeps
    the input shape: ``out[i] = sum_j weight[j] * v[i + j - k//2]`` with
    out-of-range terms treated as zero.
    """
    va, wa = _data(v), _data(weight)
    if wa.ndim != 1:
        raise DimensionError(f"conv1d weight must be rank-1, got rank {wa.ndim}", axis="k")
    k = wa.shape[0]
    if k % 2 == 0:
        raise ConfigError(f"conv1d kernel size must be odd, got {k}")
    squeeze = va.ndim == 1
    if squeeze:
        va = va[None, :]
    if va.ndim != 2:
        raise DimensionError(f"conv1d input must be (c,) or (n, c), got rank {va.ndim}", axis="c")
    if k > va.shape[1]:
        raise DimensionError(
            f"conv1d kernel size {k} exceeds channel count {va.shape[1]}", axis="c"
        )
    _check_same_dtype(va, wa)
    y = _conv1d_raw(va, wa)
    return Tensor._wrap(y[0] if squeeze else y)


def _conv1d_raw(va, wa) -> np.ndarray:
    # out[:, i] = sum_j w[j] * v[:, i + j - p], out-of-range terms zero.
    c = va.shape[1]
    k = wa.shape[0]
    p = k // 2
    out = np.zeros_like(va)
    for j in range(k):
        lo = max(0, p - j)
        hi = min(c, c + p - j)
        if lo < hi:
            out[:, lo:hi] += wa[j] * va[:, lo + j - p : hi + j - p]
    return out


def maxpool2d(x) -> Tensor:
    """2x2 max pooling with stride 2; trailing odd row/column is dropped."""
    xa = _data(x)
    if xa.ndim != 4:
        raise DimensionError(f"maxpool input must be rank-4 NCHW, got rank {xa.ndim}", axis="n")
    if xa.shape[2] < 2 or xa.shape[3] < 2:
        raise DimensionError(
            f"maxpool needs h, w >= 2, got {xa.shape[2]}x{xa.shape[3]}", axis="h"
        )
    return Tensor._wrap(_maxpool_raw(xa))


def _maxpool_raw(xa) -> np.ndarray:
    n, c, h, w = xa.shape
    oh, ow = h // 2, w // 2
    v = xa[:, :, : oh * 2, : ow * 2].reshape(n, c, oh, 2, ow, 2)
    return np.ascontiguousarray(v.max(axis=(3, 5)))


def global_avg_pool(x) -> Tensor:
    """Per-channel spatial mean: ``(n, c, h, w) -> (n, c)``."""
    xa = _data(x)
    if xa.ndim != 4:
        raise DimensionError(f"GAP input must be rank-4 NCHW, got rank {xa.ndim}", axis="n")
    if xa.shape[2] * xa.shape[3] == 0:
        raise DegenerateInputError("GAP over an empty spatial extent")
    return Tensor._wrap(_gap_raw(xa))


def _gap_raw(xa) -> np.ndarray:
    return np.ascontiguousarray(xa.mean(axis=(2, 3)))


def batchnorm2d(
    x,
    scale,
    shift,
    *,
    mode: str = "batch",
    mean=None,
    var=None,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalization followed by an affine transform.

    ``mode="batch"`` normalizes with statistics of the current tensor
    (over n, h, w); ``mode="running"`` uses the provided stored
    ``mean``/``var`` arrays.
    """
    xa, sa, ba = _data(x), _data(scale), _data(shift)
    if eps <= 0:
        raise ConfigError(f"batchnorm epsilon must be positive, got {eps}")
    if mode not in ("batch", "running"):
        raise ConfigError(f"batchnorm mode must be 'batch' or 'running', got {mode!r}")
    if xa.ndim != 4:
        raise DimensionError(f"batchnorm input must be rank-4 NCHW, got rank {xa.ndim}", axis="n")
    c = xa.shape[1]
    for name, arr in (("scale", sa), ("shift", ba)):
        if arr.shape != (c,):
            raise DimensionError(f"batchnorm {name} must have shape ({c},), got {arr.shape}", axis="c")
    if mode == "batch":
        if xa.shape[0] * xa.shape[2] * xa.shape[3] == 0:
            raise DegenerateInputError("batch statistics over zero elements")
        _check_same_dtype(xa, sa, ba)
        y, _, _ = _batchnorm_batch_raw(xa, sa, ba, eps)
        return Tensor._wrap(y)
    if mean is None or var is None:
        raise ConfigError("running mode requires stored mean and var")
    ma, va = _data(mean), _data(var)
    for name, arr in (("mean", ma), ("var", va)):
        if arr.shape != (c,):
            raise DimensionError(f"batchnorm {name} must have shape ({c},), got {arr.shape}", axis="c")
    _check_same_dtype(xa, sa, ba, ma, va)
    return Tensor._wrap(_batchnorm_running_raw(xa, sa, ba, ma, va, eps))


def _batchnorm_batch_raw(xa, sa, ba, eps):
    m = xa.shape[0] * xa.shape[2] * xa.shape[3]
    mu = xa.sum(axis=(0, 2, 3)) / m
    d = xa - mu[None, :, None, None]
    var = np.einsum("nchw,nchw->c", d, d) / m
    inv = 1.0 / np.sqrt(var + eps)
    xhat = d * inv[None, :, None, None]
    y = xhat * sa[None, :, None, None] + ba[None, :, None, None]
    return np.ascontiguousarray(y), xhat, inv


def _batchnorm_running_raw(xa, sa, ba, ma, va, eps):
    inv = 1.0 / np.sqrt(va + eps)
    y = (xa - ma[None, :, None, None]) * (sa * inv)[None, :, None, None] + ba[None, :, None, None]
    return np.ascontiguousarray(y)


def gelu(x) -> Tensor:
    """Tanh-approximated GELU: ``0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))``."""
    xa = _data(x)
    return Tensor._wrap(_gelu_raw(xa))


def _gelu_raw(xa) -> np.ndarray:
    u = _GELU_C * (xa + 0.044715 * xa * xa * xa)
    return 0.5 * xa * (1.0 + np.tanh(u))


def sigmoid(x) -> Tensor:
    """Numerically stable logistic function, range (0, 1)."""
    xa = _data(x)
    return Tensor._wrap(_sigmoid_raw(xa))


def _sigmoid_raw(xa) -> np.ndarray:
    out = np.empty_like(xa)
    pos = xa >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xa[pos]))
    ex = np.exp(xa[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_same_shape(aa, bb, opname):
    if aa.shape != bb.shape:
        names = ("n", "c", "h", "w")
        axis = None
        if aa.ndim == bb.ndim == 4:
            for i, (u, v) in enumerate(zip(aa.shape, bb.shape)):
                if u != v:
                    axis = names[i]
                    break
        raise DimensionError(
            f"{opname} requires identical shapes, got {aa.shape} and {bb.shape}", axis=axis
        )


def add(a, b) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    aa, bb = _data(a), _data(b)
    _check_same_shape(aa, bb, "add")
    _check_same_dtype(aa, bb)
    return Tensor._wrap(aa + bb)


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product of two same-shape tensors."""
    aa, bb = _data(a), _data(b)
    _check_same_shape(aa, bb, "mul")
    _check_same_dtype(aa, bb)
    return Tensor._wrap(aa * bb)


def scale_channels(x, gates) -> Tensor:
    """Multiply each channel of ``x (n,c,h,w)`` by its gate from ``(n,c)``."""
    xa, ga = _data(x), _data(gates)
    if xa.ndim != 4:
        raise DimensionError(f"scale_channels input must be rank-4, got rank {xa.ndim}", axis="n")
    if ga.shape != xa.shape[:2]:
        raise DimensionError(
            f"gates must have shape {xa.shape[:2]}, got {ga.shape}", axis="c"
        )
    _check_same_dtype(xa, ga)
    return Tensor._wrap(xa * ga[:, :, None, None])


def sqrt_eps(x, eps: float = SQRT_EPS) -> Tensor:
    """Guarded square root ``sqrt(x + eps)``, defined and smooth at x = 0."""
    xa = _data(x)
    if eps <= 0:
        raise ConfigError(f"sqrt_eps epsilon must be positive, got {eps}")
    lo = float(xa.min()) if xa.size else 0.0
    if lo < -eps:
        raise DomainError(f"sqrt_eps input {lo} below -eps ({-eps})")
    return Tensor._wrap(np.sqrt(xa + eps))


def dropout(x, rate: float, *, training: bool, rng=None) -> Tensor:
    """Inverted dropout.

    Inference mode returns the input unchanged (bit-exact).  Training mode
    zeroes each element with probability ``rate`` and scales survivors by
    ``1/(1-rate)``; the mask comes from the caller-supplied generator so a
    run seed reproduces it exactly.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x if isinstance(x, Tensor) else Tensor(_data(x))
    if rng is None:
        raise ConfigError("training-mode dropout requires a seeded generator")
    xa = _data(x)
    mask = _dropout_mask(xa.shape, rate, rng, xa.dtype)
    return Tensor._wrap(xa * mask)


def _dropout_mask(shape, rate, rng, dtype) -> np.ndarray:
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) * dtype.type(1.0 / (1.0 - rate))


def sum_all(x) -> Tensor:
    """Sum of all elements, returned as a scalar (rank-0) tensor."""
    xa = _data(x)
    return Tensor._wrap(np.asarray(xa.sum(dtype=xa.dtype)))
