"""Numeric kernels for the CNN layer set used by the search.

All tensors are NHWC numpy arrays (batch, height, width, channels).  Kernels
are pure: they never mutate their inputs and they follow the dtype of the
arrays they are given, so running a whole network in float64 only requires
building its parameters in float64.

Reductions use a fixed order (numpy pairwise sums over fixed axes, then a
fixed loop over kernel taps), so repeated calls on identical inputs give
identical bits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when kernel operands have incompatible shapes."""


def check_finite(x: np.ndarray, where: str = "tensor") -> np.ndarray:
    """Raise FloatingPointError if ``x`` holds NaN or Inf."""
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {where}")
    return x


def _require_4d(x: np.ndarray, name: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N, H, W, C), got shape {x.shape}")


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass
class ConvParams:
    """Bias-free convolution weights of shape (k1, k2, c, f)."""

    w: np.ndarray

    def __post_init__(self):
        if self.w.ndim != 4:
            raise ShapeError(f"conv weights must be (k1, k2, c, f), got {self.w.shape}")
        k1, k2 = self.w.shape[:2]
        if k1 % 2 == 0 or k2 % 2 == 0:
            raise ShapeError(f"kernel extents must be odd, got {k1}x{k2}")

    @property
    def in_channels(self) -> int:
        return self.w.shape[2]

    @property
    def filters(self) -> int:
        return self.w.shape[3]

    def copy(self) -> "ConvParams":
        return ConvParams(self.w.copy())


def identity_running_var(eps: float, dtype) -> np.ndarray:
    """Smallest-effort value ``v`` with ``fl(v + eps) == 1`` in ``dtype``.

    Inference normalisation divides by ``sqrt(v + eps)``; this makes that
    divisor exactly one so a freshly calibrated layer is a bit-exact identity.
    """
    dtype = np.dtype(dtype)
    one = dtype.type(1.0)
    e = dtype.type(eps)
    v = one - e
    step = 0
    while v + e != one:
        v = np.nextafter(v, one if v + e < one else dtype.type(0.0))
        step += 1
        if step > 64:
            raise RuntimeError("could not calibrate identity running variance")
    return v


@dataclass
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def identity(cls, channels: int, dtype=np.float32, eps: float = BN_EPS) -> "BnParams":
        """Parameters whose inference-mode transform is exactly ``y = x``."""
        dtype = np.dtype(dtype)
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.full(channels, identity_running_var(eps, dtype), dtype),
            eps=eps,
        )

    def copy(self) -> "BnParams":
        return BnParams(
            self.gamma.copy(),
            self.beta.copy(),
            self.running_mean.copy(),
            self.running_var.copy(),
            self.eps,
        )

    def take(self, index) -> "BnParams":
        """Per-channel gather, used when filters are replicated or split."""
        index = np.asarray(index)
        return BnParams(
            self.gamma[index].copy(),
            self.beta[index].copy(),
            self.running_mean[index].copy(),
            self.running_var[index].copy(),
            self.eps,
        )


@dataclass
class SgdrSchedule:
    """Cosine annealing with warm restarts at geometrically growing cycles."""

    l_max: float = 0.05
    t0: int = 1
    t_mult: int = 2

    def __post_init__(self):
        if self.l_max <= 0:
            raise ValueError("l_max must be positive")
        if self.t0 < 1 or int(self.t0) != self.t0:
            raise ValueError("t0 must be a positive integer")
        if self.t_mult < 1 or int(self.t_mult) != self.t_mult:
            raise ValueError("t_mult must be an integer >= 1")

    def cycle(self, epoch: float) -> tuple[float, float]:
        """Return (cycle_start, cycle_length) for the cycle containing ``epoch``."""
        if epoch < 0:
            raise ValueError("epoch must be non-negative")
        start, length = 0, self.t0
        while epoch >= start + length:
            start += length
            length *= self.t_mult
        return float(start), float(length)


def sgdr_lr(schedule: SgdrSchedule, epoch: float) -> float:
    """Learning rate at a (possibly fractional) epoch position."""
    start, length = schedule.cycle(epoch)
    t_cur = epoch - start
    return schedule.l_max * 0.5 * (1.0 + math.cos(math.pi * t_cur / length))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _pad_same(x: np.ndarray, k1: int, k2: int) -> np.ndarray:
    p1, p2 = k1 // 2, k2 // 2
    if p1 == 0 and p2 == 0:
        return x
    return np.pad(x, ((0, 0), (p1, p1), (p2, p2), (0, 0)))


def im2col(x: np.ndarray, k1: int, k2: int) -> np.ndarray:
    """Same-padded patches as a (N*H*W, k1*k2*C) matrix in (tap row, tap col, channel) order."""
    n, h, w, c = x.shape
    if k1 == 1 and k2 == 1:
        return x.reshape(n * h * w, c)
    xp = _pad_same(x, k1, k2)
    win = sliding_window_view(xp, (k1, k2), axis=(1, 2))  # (N, H, W, C, k1, k2)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k1 * k2 * c)


def _check_conv(x: np.ndarray, w: np.ndarray) -> None:
    _require_4d(x, "conv input")
    if w.ndim != 4:
        raise ShapeError(f"conv weights must be (k1, k2, c, f), got {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise ShapeError(
            f"conv input shape {x.shape} has {x.shape[3]} channels but weights "
            f"shape {w.shape} expect {w.shape[2]}"
        )


def conv2d_forward(x: np.ndarray, w, return_cols: bool = False):
    """Stride-1 same-padded cross-correlation.

    ``w`` may be a ConvParams or a raw (k1, k2, c, f) array. With
    ``return_cols`` the im2col matrix is returned as well so a training pass
    can hand it back to :func:`conv2d_backward`.
    """
    w = w.w if isinstance(w, ConvParams) else w
    _check_conv(x, w)
    k1, k2, c, f = w.shape
    n, h, wd, _ = x.shape
    cols = im2col(x, k1, k2)
    y = (cols @ w.reshape(k1 * k2 * c, f)).reshape(n, h, wd, f)
    if return_cols:
        return y, cols
    return y


def conv2d_backward(x: np.ndarray, w, grad_out: np.ndarray, cols: np.ndarray | None = None):
    """Gradients of ``sum(grad_out * conv2d_forward(x, w))`` w.r.t. x and w."""
    w = w.w if isinstance(w, ConvParams) else w
    _check_conv(x, w)
    k1, k2, c, f = w.shape
    n, h, wd, _ = x.shape
    if grad_out.shape != (n, h, wd, f):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match conv output shape {(n, h, wd, f)}"
        )
    if cols is None:
        cols = im2col(x, k1, k2)
    g = grad_out.reshape(n * h * wd, f)
    grad_w = (cols.T @ g).reshape(k1, k2, c, f)
    gcols = (g @ w.reshape(k1 * k2 * c, f).T).reshape(n, h, wd, k1, k2, c)
    if k1 == 1 and k2 == 1:
        return gcols.reshape(n, h, wd, c), grad_w
    p1, p2 = k1 // 2, k2 // 2
    gxp = np.zeros((n, h + 2 * p1, wd + 2 * p2, c), dtype=grad_out.dtype)
    for i in range(k1):
        for j in range(k2):
            gxp[:, i : i + h, j : j + wd, :] += gcols[:, :, :, i, j, :]
    return gxp[:, p1 : p1 + h, p2 : p2 + wd, :], grad_w


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------


@dataclass
class BatchStats:
    mean: np.ndarray
    var: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray


def batchnorm_forward(x: np.ndarray, p: BnParams, mode: str = "train", momentum: float = BN_MOMENTUM):
    """Per-channel batch normalisation.

    Returns ``(y, stats)``.  In train mode ``stats`` carries the updated
    running statistics (the caller decides whether to commit them); in infer
    mode it is None.
    """
    _require_4d(x, "batchnorm input")
    if x.shape[3] != p.channels:
        raise ShapeError(f"batchnorm input shape {x.shape} vs {p.channels} channels")
    if mode == "infer":
        inv_std = 1.0 / np.sqrt(p.running_var + x.dtype.type(p.eps))
        y = (x - p.running_mean) * inv_std * p.gamma + p.beta
        return y, None
    if mode != "train":
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    mean = x.mean(axis=(0, 1, 2))
    var = ((x - mean) ** 2).mean(axis=(0, 1, 2))
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(p.eps))
    xhat = (x - mean) * inv_std
    y = xhat * p.gamma + p.beta
    m = x.dtype.type(momentum)
    stats = BatchStats(
        mean=mean,
        var=var,
        xhat=xhat,
        inv_std=inv_std,
        running_mean=m * p.running_mean + (1 - m) * mean,
        running_var=m * p.running_var + (1 - m) * var,
    )
    return y, stats


def batchnorm_backward(grad_out: np.ndarray, p: BnParams, stats: BatchStats):
    """Gradients (dx, dgamma, dbeta) through train-mode normalisation."""
    if grad_out.shape != stats.xhat.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} vs activation shape {stats.xhat.shape}")
    n = grad_out.shape[0] * grad_out.shape[1] * grad_out.shape[2]
    dbeta = grad_out.sum(axis=(0, 1, 2))
    dgamma = (grad_out * stats.xhat).sum(axis=(0, 1, 2))
    dx = (p.gamma * stats.inv_std / n) * (n * grad_out - dbeta - stats.xhat * dgamma)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# elementwise, pooling, head
# ---------------------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # x == 0 passes no gradient
    return grad_out * (x > 0)


def _pad_even(x: np.ndarray) -> np.ndarray:
    ph, pw = x.shape[1] % 2, x.shape[2] % 2
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)), constant_values=-np.inf)


def maxpool2_forward(x: np.ndarray):
    """2x2/stride-2 max pooling. Returns ``(y, argmax)``; ties go to the first
    element of the window in row-major order."""
    _require_4d(x, "maxpool input")
    xp = _pad_even(x)
    n, h, w, c = xp.shape
    win = xp.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    win = win.reshape(n, h // 2, w // 2, 4, c)
    idx = win.argmax(axis=3)
    y = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return y, idx


def maxpool2(x: np.ndarray) -> np.ndarray:
    return maxpool2_forward(x)[0]


def maxpool2_backward(x_shape: tuple, idx: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    n, h, w, c = x_shape
    ho, wo = idx.shape[1], idx.shape[2]
    gwin = np.zeros((n, ho, wo, 4, c), dtype=grad_out.dtype)
    np.put_along_axis(gwin, idx[:, :, :, None, :], grad_out[:, :, :, None, :], axis=3)
    g = gwin.reshape(n, ho, wo, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * ho, 2 * wo, c)
    return g[:, :h, :w, :]


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    _require_4d(x, "global pool input")
    return x.mean(axis=(1, 2), keepdims=True)


def global_avg_pool_backward(x_shape: tuple, grad_out: np.ndarray) -> np.ndarray:
    n, h, w, c = x_shape
    return np.broadcast_to(grad_out / (h * w), (n, h, w, c)).copy()


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear input shape {x.shape} vs weights shape {w.shape}")
    return x @ w + b


def linear_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray):
    return grad_out @ w.T, x.T @ grad_out, grad_out.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = logits.reshape(logits.shape[0], -1)
    labels = np.asarray(labels)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} vs batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"label index out of range for {classes} classes")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float((logsum - z[rows, labels]).mean())
    grad = softmax(logits)
    grad[rows, labels] -= 1
    return loss, grad / n


def sgd_step(p: np.ndarray, g: np.ndarray, lr: float, weight_decay: float = 0.0) -> np.ndarray:
    """``p - lr * (g + weight_decay * p)`` in the parameter's dtype."""
    t = p.dtype.type
    if weight_decay:
        return p - t(lr) * (g + t(weight_decay) * p)
    return p - t(lr) * g
