"""Forward primitives with reverse-mode gradients.

Every op validates shapes, rejects non-finite outputs, and registers a
backward closure on the active tape. All math is float64; dropout draws from
a counter-based stream keyed by an explicit seed so replays are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from mlfd.errors import ConfigError, ShapeError
from mlfd.numerics.tensor import Tensor, record_op
from mlfd.seeding import generator

LOG_EPS = 1e-12
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def xavier_init(fan_in: int, fan_out: int, seed: int, shape=None) -> Tensor:
    """Normal draw with mean 0 and variance 2/(fan_in+fan_out), deterministic
    in `seed`. `shape` defaults to (fan_in, fan_out)."""
    if fan_in < 1 or fan_out < 1:
        raise ConfigError(f"xavier_init requires positive fans, got ({fan_in}, {fan_out})")
    if shape is None:
        shape = (fan_in, fan_out)
    std = np.sqrt(2.0 / (fan_in + fan_out))
    rng = generator("xavier", seed)
    return Tensor(rng.normal(0.0, std, size=shape))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return record_op(out, (a, b), bw, "matmul")


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature bias: (B,F)+(F,) or (B,C,H,W)+(C,)."""
    if b.data.ndim != 1:
        raise ShapeError(f"bias_add: bias must be rank 1, got {b.shape}")
    if x.data.ndim == 2:
        if x.shape[1] != b.shape[0]:
            raise ShapeError(f"bias_add: axis 1 of {x.shape} vs bias {b.shape}")
        out = x.data + b.data

        def bw(g):
            return g, g.sum(axis=0)

    elif x.data.ndim == 4:
        if x.shape[1] != b.shape[0]:
            raise ShapeError(f"bias_add: channel axis of {x.shape} vs bias {b.shape}")
        out = x.data + b.data[None, :, None, None]

        def bw(g):
            return g, g.sum(axis=(0, 2, 3))

    else:
        raise ShapeError(f"bias_add: rank {x.data.ndim} input unsupported")
    return record_op(out, (x, b), bw, "bias_add")


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return record_op(out, (a, b), bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return record_op(out, (a, b), bw, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * c

    def bw(g):
        return (g * c,)

    return record_op(out, (x,), bw, "scale")


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation: x (B,Cin,H,W) with kernels w (Cout,Cin,KH,KW)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need rank-4 input and kernel, got {x.shape}, {w.shape}")
    B, cin, H, W = x.shape
    cout, cin_w, KH, KW = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} vs kernel channels {cin_w}")
    s, p = int(stride), int(padding)
    if H + 2 * p < KH or W + 2 * p < KW:
        raise ShapeError(f"conv2d: kernel ({KH},{KW}) exceeds padded input ({H + 2 * p},{W + 2 * p})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    windows = sliding_window_view(xp, (KH, KW), axis=(2, 3))[:, :, ::s, ::s, :, :]
    oh, ow = windows.shape[2], windows.shape[3]
    out = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.transpose(out, (0, 3, 1, 2))

    def bw(g):
        gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for kh in range(KH):
            for kw in range(KW):
                contrib = np.tensordot(g, w.data[:, :, kh, kw], axes=([1], [0]))
                gxp[:, :, kh : kh + s * oh : s, kw : kw + s * ow : s] += np.transpose(
                    contrib, (0, 3, 1, 2)
                )
        gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
        return gx, gw

    return record_op(np.ascontiguousarray(out), (x, w), bw, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: need rank-4 input, got {x.shape}")
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (H * W), x.data.shape).copy(),)

    return record_op(out, (x,), bw, "global_avg_pool")


def avg_pool2d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping mean pooling; spatial extents must divide `size`."""
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool2d: need rank-4 input, got {x.shape}")
    B, C, H, W = x.shape
    k = int(size)
    if H % k or W % k:
        raise ShapeError(f"avg_pool2d: extents ({H},{W}) not divisible by {k}")
    oh, ow = H // k, W // k
    out = x.data.reshape(B, C, oh, k, ow, k).mean(axis=(3, 5))

    def bw(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None] / (k * k), (B, C, oh, k, ow, k))
        return (gx.reshape(B, C, H, W).copy(),)

    return record_op(out, (x,), bw, "avg_pool2d")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def bw(g):
        return (g * (x.data > 0.0),)

    return record_op(out, (x,), bw, "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian error linear unit, 0.5*x*(1+erf(x/sqrt(2)))."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return record_op(out, (x,), bw, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))

    def bw(g):
        return (g * out * (1.0 - out),)

    return record_op(out, (x,), bw, "sigmoid")


# ---------------------------------------------------------------------------
# normalization and regularization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    """Running statistics, updated by exponential moving average in train mode."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        return cls(
            running_mean=np.zeros(num_features),
            running_var=np.ones(num_features),
            momentum=momentum,
            eps=eps,
        )


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Batch normalization over the feature/channel axis.

    Train mode normalizes with batch statistics and updates the running
    EMA; eval mode normalizes with the stored running statistics.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"batchnorm: mode must be 'train' or 'eval', got {mode!r}")
    if x.data.ndim == 2:
        axes = (0,)
        expand = (None, slice(None))
    elif x.data.ndim == 4:
        axes = (0, 2, 3)
        expand = (None, slice(None), None, None)
    else:
        raise ShapeError(f"batchnorm: rank {x.data.ndim} input unsupported")
    nfeat = x.shape[1]
    if gamma.shape != (nfeat,) or beta.shape != (nfeat,):
        raise ShapeError(f"batchnorm: gamma/beta {gamma.shape}/{beta.shape} vs features ({nfeat},)")

    eps = state.eps
    if mode == "train":
        n = x.data.size // nfeat
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        correction = n / max(n - 1, 1)
        state.running_mean *= 1.0 - state.momentum
        state.running_mean += state.momentum * mean
        state.running_var *= 1.0 - state.momentum
        state.running_var += state.momentum * var * correction
    else:
        mean = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[expand]) * inv_std[expand]
    out = gamma.data[expand] * xhat + beta.data[expand]

    if mode == "train":

        def bw(g):
            n = x.data.size // nfeat
            dxhat = g * gamma.data[expand]
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            mean_dxhat = dxhat.mean(axis=axes)
            mean_dxhat_xhat = (dxhat * xhat).mean(axis=axes)
            gx = inv_std[expand] * (dxhat - mean_dxhat[expand] - xhat * mean_dxhat_xhat[expand])
            return gx, dgamma, dbeta

    else:

        def bw(g):
            gx = g * (gamma.data * inv_std)[expand]
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            return gx, dgamma, dbeta

    return record_op(out, (x, gamma, beta), bw, "batchnorm")


def dropout(x: Tensor, p: float, seed: int, mode: str = "train") -> Tensor:
    """Inverted dropout: kept activations are scaled by 1/(1-p) in train
    mode; eval mode is the exact identity."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout: p must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"dropout: mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        return x
    rng = generator("dropout", seed)
    keep = (rng.random(x.data.shape) >= p).astype(np.float64) / (1.0 - p)
    out = x.data * keep

    def bw(g):
        return (g * keep,)

    return record_op(out, (x,), bw, "dropout")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def concat_channels(tensors) -> Tensor:
    """Concatenate along axis 1; all other extents must match."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat_channels: empty input list")
    base = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(base) or s[0] != base[0] or s[2:] != base[2:]:
            raise ShapeError(f"concat_channels: non-channel axes differ, {base} vs {s}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    extents = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + extents)

    def bw(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return record_op(out, tuple(tensors), bw, "concat_channels")


def flatten(x: Tensor) -> Tensor:
    """Collapse all axes after the batch axis."""
    B = x.shape[0]
    out = x.data.reshape(B, -1)

    def bw(g):
        return (g.reshape(x.data.shape),)

    return record_op(out, (x,), bw, "flatten")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.data.shape),)

    return record_op(out, (x,), bw, "reshape")


# ---------------------------------------------------------------------------
# losses and probabilities
# ---------------------------------------------------------------------------


def softmax_with_temperature(logits: Tensor, tau: float) -> Tensor:
    """Row-wise softmax(logits/tau) with max-subtraction for stability."""
    if tau <= 0:
        raise ConfigError(f"softmax_with_temperature: tau must be positive, got {tau}")
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_with_temperature: need rank-2 logits, got {logits.shape}")
    z = logits.data / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((out * (g - dot)) / tau,)

    return record_op(out, (logits,), bw, "softmax_with_temperature")


def _check_row_stochastic(name: str, arr: np.ndarray, tol: float = 1e-6):
    sums = arr.sum(axis=1)
    worst = float(np.abs(sums - 1.0).max()) if arr.size else 0.0
    if worst > tol or np.any(arr < -tol):
        raise ConfigError(f"{name}: rows are not probability distributions (max |sum-1| = {worst:.3g})")


def cross_entropy(pred_probs: Tensor, target_probs: Tensor) -> Tensor:
    """Mean over rows of -sum(target * log(pred + eps)); both arguments must
    be row-stochastic within 1e-6."""
    if pred_probs.shape != target_probs.shape:
        raise ShapeError(f"cross_entropy: shapes {pred_probs.shape} vs {target_probs.shape}")
    if pred_probs.data.ndim != 2:
        raise ShapeError(f"cross_entropy: need rank-2 inputs, got {pred_probs.shape}")
    _check_row_stochastic("cross_entropy pred", pred_probs.data)
    _check_row_stochastic("cross_entropy target", target_probs.data)
    B = pred_probs.shape[0]
    logp = np.log(pred_probs.data + LOG_EPS)
    out = np.array(-(target_probs.data * logp).sum() / B)

    def bw(g):
        coeff = float(g.reshape(())) / B
        gpred = -coeff * target_probs.data / (pred_probs.data + LOG_EPS)
        gtarget = -coeff * logp
        return gpred, gtarget

    return record_op(out, (pred_probs, target_probs), bw, "cross_entropy")


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared elementwise differences."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = max(a.data.size, 1)
    out = np.array((diff * diff).sum() / n)

    def bw(g):
        coeff = 2.0 * float(g.reshape(())) / n
        return coeff * diff, -coeff * diff

    return record_op(out, (a, b), bw, "mse")
