"""Forward and backward passes for every layer type in the network.

Tensors are plain numpy arrays of shape (n, c, h, w), float32 in production
and float64 in gradient-check builds.  Each ``*_forward`` has a matching
``*_backward`` taking the cache of forward inputs; all functions are pure
apart from the documented running-stat update in batch norm.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import backend
from .errors import DataError, ShapeError, UsageError


def _require_4d(name, arr):
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be 4-d (n,c,h,w), got shape {arr.shape}")


class ConvCache(NamedTuple):
    x: np.ndarray
    weight: np.ndarray
    stride: int
    pad: int


class TConvCache(NamedTuple):
    x: np.ndarray
    weight: np.ndarray


class BnCache(NamedTuple):
    x_hat: np.ndarray
    gamma: np.ndarray
    inv_std: np.ndarray


class PreluCache(NamedTuple):
    x: np.ndarray
    slope: np.ndarray


@dataclass
class RunningStats:
    """Per-channel batch-norm running statistics (EMA of batch moments)."""

    mean: np.ndarray
    var: np.ndarray
    batches: int = 0


@dataclass
class Param:
    """Trainable tensor with gradient and momentum buffers of equal shape."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)
    momentum: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.momentum is None:
            self.momentum = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape or self.momentum.shape != self.value.shape:
            raise ShapeError(
                f"param buffers must share dims: value {self.value.shape}, "
                f"grad {self.grad.shape}, momentum {self.momentum.shape}")


def conv2d_forward(x, weight, bias, stride=1, pad=1):
    """3x3 (or kxk) cross-correlation plus bias.

    x (n,ci,h,w), weight (co,ci,kh,kw), bias (co,).  stride 1 with pad 1 and
    a 3x3 kernel preserves the spatial dims.
    """
    _require_4d("input", x)
    _require_4d("weight", weight)
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"input channels {x.shape} do not match weight {weight.shape}")
    if stride not in (1, 2):
        raise UsageError(f"stride must be 1 or 2, got {stride}")
    if pad < 0:
        raise UsageError(f"pad must be >= 0, got {pad}")
    oh = (x.shape[2] + 2 * pad - weight.shape[2]) // stride + 1
    ow = (x.shape[3] + 2 * pad - weight.shape[3]) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"kernel {weight.shape} does not fit input {x.shape} at pad {pad}")
    x, weight, bias = _common_dtype(x, weight, bias)
    return backend.conv2d_forward(x, weight, bias, stride, pad)


def conv2d_backward(cache, grad_out):
    """Exact gradients of conv2d_forward: (grad_input, grad_weight, grad_bias)."""
    if cache is None:
        raise UsageError("conv2d_backward called without a forward cache")
    _require_4d("grad_out", grad_out)
    if grad_out.shape[1] != cache.weight.shape[0]:
        raise ShapeError(
            f"grad_out {grad_out.shape} does not match weight {cache.weight.shape}")
    grad_out = np.ascontiguousarray(grad_out, dtype=cache.x.dtype)
    return backend.conv2d_backward(cache.x, cache.weight, grad_out,
                                   cache.stride, cache.pad)


def transposed_conv2d_forward(x, weight, bias, stride=2):
    """Learned 2x up-convolution: weight (ci,co,2,2), stride fixed to 2."""
    _require_4d("input", x)
    _require_4d("weight", weight)
    if stride != 2 or weight.shape[2] != 2 or weight.shape[3] != 2:
        raise UsageError("transposed conv supports kernel 2x2 with stride 2 only")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"input channels {x.shape} do not match weight {weight.shape}")
    x, weight, bias = _common_dtype(x, weight, bias)
    return backend.tconv2d_forward(x, weight, bias)


def transposed_conv2d_backward(cache, grad_out):
    if cache is None:
        raise UsageError("transposed_conv2d_backward called without a forward cache")
    _require_4d("grad_out", grad_out)
    expect = (cache.x.shape[0], cache.weight.shape[1],
              2 * cache.x.shape[2], 2 * cache.x.shape[3])
    if grad_out.shape != expect:
        raise ShapeError(f"grad_out shape {grad_out.shape}, expected {expect}")
    grad_out = np.ascontiguousarray(grad_out, dtype=cache.x.dtype)
    return backend.tconv2d_backward(cache.x, cache.weight, grad_out)


def _common_dtype(x, *rest):
    dt = x.dtype
    out = [np.ascontiguousarray(x)]
    for a in rest:
        out.append(np.ascontiguousarray(a, dtype=dt))
    return out


def batchnorm_forward(x, gamma, beta, stats, mode, momentum=0.1, eps=1e-5):
    """Per-channel normalization over (n,h,w).

    Train mode uses batch moments and folds them into ``stats`` by EMA;
    eval mode applies the stored running stats (input-independent affine).
    Returns (out, cache); cache is None in eval mode.
    """
    _require_4d("input", x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    if eps <= 0:
        raise UsageError(f"epsilon must be > 0, got {eps}")
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        out = gamma[None, :, None, None] * x_hat + beta[None, :, None, None]
        stats.mean = (1.0 - momentum) * stats.mean + momentum * mean
        stats.var = (1.0 - momentum) * stats.var + momentum * var
        stats.batches += 1
        return out, BnCache(x_hat=x_hat, gamma=gamma, inv_std=inv_std)
    if mode == "eval":
        if stats.batches == 0:
            raise UsageError("eval-mode batch norm before any running stats exist")
        inv_std = 1.0 / np.sqrt(stats.var + eps)
        scale = gamma * inv_std
        shift = beta - stats.mean * scale
        return x * scale[None, :, None, None] + shift[None, :, None, None], None
    raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")


def batchnorm_backward(cache, grad_out):
    """Exact gradient of the train-mode forward (through the batch moments)."""
    if cache is None:
        raise UsageError("batchnorm_backward needs a train-mode cache")
    if grad_out.shape != cache.x_hat.shape:
        raise ShapeError(
            f"grad_out {grad_out.shape} does not match input {cache.x_hat.shape}")
    x_hat, gamma, inv_std = cache
    m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * x_hat).sum(axis=(0, 2, 3))
    gscale = (gamma * inv_std)[None, :, None, None]
    grad_x = gscale * (grad_out
                       - grad_beta[None, :, None, None] / m
                       - x_hat * grad_gamma[None, :, None, None] / m)
    return grad_x, grad_gamma, grad_beta


def prelu_forward(x, slope):
    """out = x for x >= 0, slope_c * x otherwise (slope learned per channel)."""
    _require_4d("input", x)
    if slope.shape != (x.shape[1],):
        raise ShapeError(
            f"slope must have shape ({x.shape[1]},), got {slope.shape}")
    neg = np.minimum(x, 0)
    return np.maximum(x, 0) + slope[None, :, None, None] * neg


def prelu_backward(cache, grad_out):
    x, slope = cache
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out {grad_out.shape} does not match input {x.shape}")
    negmask = x < 0
    grad_x = grad_out * np.where(negmask, slope[None, :, None, None], 1.0)
    grad_slope = (grad_out * np.where(negmask, x, 0.0)).sum(axis=(0, 2, 3))
    return grad_x, grad_slope


def softmax_channels(logits):
    """Channel-axis softmax with max subtraction for stability."""
    _require_4d("logits", logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def weighted_ce_loss(probs, labels, weights):
    """Class-weighted cross entropy over all pixels.

    probs (n,C,h,w) from softmax_channels, labels (n,h,w) integer class ids,
    weights one positive factor per class.  Returns the scalar loss and its
    exact gradient with respect to the logits that produced ``probs``.
    """
    _require_4d("probs", probs)
    n, nc, h, w = probs.shape
    weights = np.asarray(weights, dtype=probs.dtype)
    if weights.shape != (nc,):
        raise ShapeError(f"need {nc} class weights, got shape {weights.shape}")
    if np.any(weights <= 0):
        raise DataError("class weights must be strictly positive")
    if labels.shape != (n, h, w):
        raise ShapeError(
            f"labels shape {labels.shape} does not match probs {probs.shape}")
    labels = labels.astype(np.int64, copy=False)
    bad = (labels < 0) | (labels >= nc)
    if bad.any():
        idx = np.argwhere(bad)[0]
        raise DataError(
            f"label {labels[tuple(idx)]} out of range [0,{nc - 1}] "
            f"at voxel index {tuple(int(i) for i in idx)}")

    npix = n * h * w
    onehot_idx = (np.arange(n)[:, None, None], labels,
                  np.arange(h)[None, :, None], np.arange(w)[None, None, :])
    p_true = probs[onehot_idx]
    w_true = weights[labels]
    tiny = np.finfo(probs.dtype).tiny
    loss = float(-(w_true * np.log(np.maximum(p_true, tiny))).sum() / npix)

    grad = probs * (w_true[:, None, :, :] / npix)
    grad[onehot_idx] -= w_true / npix
    return loss, grad


def add_elementwise(a, b):
    """Residual addition; operands must share all dims."""
    if a.shape != b.shape:
        raise ShapeError(f"add requires equal dims, got {a.shape} and {b.shape}")
    return a + b


def concat_channels(a, b):
    """Channel concatenation, a's channels first; n/h/w must match."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"concat requires matching n,h,w, got {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)
