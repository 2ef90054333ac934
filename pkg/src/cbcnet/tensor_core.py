"""Dense float64 kernels on (N, C, H, W) arrays.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Every kernel
is a pure function; layer objects that cache activations live in
:mod:`cbcnet.layers` and :mod:`cbcnet.hybrid_layer`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import NumericError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ConvGeometry:
    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if min(self.kernel_h, self.kernel_w, self.in_channels, self.out_channels) < 1:
            raise ShapeError(f"non-positive dimension in {self}")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError(f"invalid stride/padding in {self}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {h}x{w} too small for {self}")
        return ho, wo

    def to_dict(self) -> dict:
        return {
            "kernel_h": self.kernel_h,
            "kernel_w": self.kernel_w,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "stride": self.stride,
            "padding": self.padding,
        }


def as_tensor4(x, name: str = "tensor") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or min(x.shape) < 1:
        raise ShapeError(f"{name} must be a non-empty 4-D array, got shape {x.shape}")
    return x


def check_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    # a non-finite sum means a NaN/Inf entry (or an overflow, equally fatal)
    if not math.isfinite(x.sum()):
        raise NumericError(f"{name} contains NaN or Inf")
    return x


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if not p:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p))
    out[:, :, p : p + h, p : p + w] = x
    return out


def _columns(x: np.ndarray, geom: ConvGeometry, out_hw: tuple[int, int]) -> np.ndarray:
    """Unfolded input windows as an (N*Ho*Wo, C*kh*kw) matrix."""
    xp = np.ascontiguousarray(_pad(x, geom.padding))
    n, c = xp.shape[:2]
    ho, wo = out_hw
    s = geom.stride
    sn, sc, sh, sw = xp.strides
    # (N, Ho, Wo, C, kh, kw) read-only view
    win = as_strided(
        xp,
        shape=(n, ho, wo, c, geom.kernel_h, geom.kernel_w),
        strides=(sn, sh * s, sw * s, sc, sh, sw),
        writeable=False,
    )
    return win.reshape(n * ho * wo, -1)


def _check_input(x: np.ndarray, geom: ConvGeometry) -> None:
    if x.shape[1] != geom.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, geometry expects {geom.in_channels}")


def conv2d_forward(x, weights, bias, geom: ConvGeometry) -> np.ndarray:
    """Cross-correlation with symmetric zero padding.

    ``out[n,m,i,j] = bias[m] + sum_{c,u,v} x[n,c,i*s+u-p,j*s+v-p] * weights[m,c,u,v]``
    """
    x = check_finite(as_tensor4(x, "input"), "input")
    weights = as_tensor4(weights, "weights")
    if weights.shape != geom.weight_shape:
        raise ShapeError(f"weights shape {weights.shape} != {geom.weight_shape}")
    _check_input(x, geom)
    ho, wo = geom.output_hw(x.shape[2], x.shape[3])
    cols = _columns(x, geom, (ho, wo))
    out = cols @ weights.reshape(geom.out_channels, -1).T
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (geom.out_channels,):
            raise ShapeError(f"bias shape {bias.shape} != ({geom.out_channels},)")
        out += bias
    out = np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, -1).transpose(0, 3, 1, 2))
    return check_finite(out, "conv output")


def _check_grad_out(x_shape, grad_out: np.ndarray, geom: ConvGeometry) -> None:
    ho, wo = geom.output_hw(x_shape[2], x_shape[3])
    expected = (x_shape[0], geom.out_channels, ho, wo)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != {expected}")


def _grad_matrix(grad_out: np.ndarray) -> np.ndarray:
    # (N, M, Ho, Wo) -> (N*Ho*Wo, M)
    return grad_out.transpose(0, 2, 3, 1).reshape(-1, grad_out.shape[1])


def conv2d_backward_weights(x, grad_out, geom: ConvGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(grad_weights, grad_bias)`` for :func:`conv2d_forward`."""
    x = as_tensor4(x, "input")
    grad_out = as_tensor4(grad_out, "grad_out")
    _check_input(x, geom)
    _check_grad_out(x.shape, grad_out, geom)
    g = _grad_matrix(grad_out)
    cols = _columns(x, geom, grad_out.shape[2:])
    grad_w = (g.T @ cols).reshape(geom.weight_shape)
    return grad_w, g.sum(axis=0)


def conv2d_backward_input(weights, grad_out, geom: ConvGeometry, input_hw: tuple[int, int]) -> np.ndarray:
    """Gradient of :func:`conv2d_forward` with respect to its input (transposed convolution)."""
    weights = as_tensor4(weights, "weights")
    grad_out = as_tensor4(grad_out, "grad_out")
    if weights.shape != geom.weight_shape:
        raise ShapeError(f"weights shape {weights.shape} != {geom.weight_shape}")
    h, w = input_hw
    n = grad_out.shape[0]
    _check_grad_out((n, geom.in_channels, h, w), grad_out, geom)
    ho, wo = grad_out.shape[2:]
    p, s = geom.padding, geom.stride
    kh, kw = geom.kernel_h, geom.kernel_w
    cols = (_grad_matrix(grad_out) @ weights.reshape(geom.out_channels, -1))
    cols = cols.reshape(n, ho, wo, geom.in_channels, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    gx = np.zeros((n, geom.in_channels, h + 2 * p, w + 2 * p))
    for u in range(kh):
        for v in range(kw):
            gx[:, :, u : u + (ho - 1) * s + 1 : s, v : v + (wo - 1) * s + 1 : s] += cols[:, :, u, v]
    return np.ascontiguousarray(gx[:, :, p : p + h, p : p + w])


def relu_forward(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x, grad_out) -> np.ndarray:
    x = np.asarray(x)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if x.shape != grad_out.shape:
        raise ShapeError(f"relu grad shape {grad_out.shape} != {x.shape}")
    return grad_out * (x > 0)


def maxpool2x2_forward(x) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling, stride 2; odd trailing rows/cols are dropped.

    Returns ``(out, argmax)`` where ``argmax`` indexes the flattened 2x2 window
    (first maximum wins on ties).
    """
    x = as_tensor4(x, "input")
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {h}x{w} too small for 2x2 pooling")
    blocks = x[:, :, : 2 * ho, : 2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2x2_backward(grad_out, argmax, input_shape) -> np.ndarray:
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != argmax.shape:
        raise ShapeError(f"pool grad shape {grad_out.shape} != {argmax.shape}")
    n, c, h, w = input_shape
    ho, wo = grad_out.shape[2:]
    blocks = np.zeros((n, c, ho, wo, 4))
    np.put_along_axis(blocks, argmax[..., None], grad_out[..., None], axis=-1)
    blocks = blocks.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    gx = np.zeros((n, c, h, w))
    gx[:, :, : 2 * ho, : 2 * wo] = blocks
    return gx


def global_avg_pool_forward(x) -> np.ndarray:
    x = as_tensor4(x, "input")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(grad_out, input_shape) -> np.ndarray:
    n, c, h, w = input_shape
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (n, c):
        raise ShapeError(f"pool grad shape {grad_out.shape} != {(n, c)}")
    return np.broadcast_to(grad_out[:, :, None, None] / (h * w), input_shape).copy()


def dense_forward(x, weights, bias) -> np.ndarray:
    """``x`` of shape (N, D) (or anything flattening to it) times ``weights`` (K, D)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 1:
        raise ShapeError("empty batch")
    x2 = x.reshape(x.shape[0], -1)
    if x2.shape[1] != weights.shape[1]:
        raise ShapeError(f"dense input width {x2.shape[1]} != {weights.shape[1]}")
    return x2 @ weights.T + bias


def dense_backward(x, weights, grad_out) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(grad_input, grad_weights, grad_bias)``; grad_input has ``x``'s shape."""
    x = np.asarray(x, dtype=np.float64)
    x2 = x.reshape(x.shape[0], -1)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (x2.shape[0], weights.shape[0]):
        raise ShapeError(f"dense grad shape {grad_out.shape} mismatch")
    gx = (grad_out @ weights).reshape(x.shape)
    return gx, grad_out.T @ x2, grad_out.sum(axis=0)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, training: bool,
                      eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
    """Per-channel batch normalization over (N, H, W).

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance, like PyTorch).
    Returns ``(out, cache)``; ``cache`` is ``None`` in inference mode.
    """
    x = as_tensor4(x, "input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm parameters do not match {c} channels")
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        count = x.shape[0] * x.shape[2] * x.shape[3]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        unbiased = var * count / (count - 1) if count > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = (xhat, inv_std, gamma) if training else None
    return out, cache


def batchnorm_backward(grad_out, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backward of training-mode batchnorm; returns ``(grad_x, grad_gamma, grad_beta)``."""
    xhat, inv_std, gamma = cache
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != xhat.shape:
        raise ShapeError(f"batchnorm grad shape {grad_out.shape} != {xhat.shape}")
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    count = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    gxhat = grad_out * gamma[None, :, None, None]
    gx = (
        gxhat
        - gxhat.mean(axis=(0, 2, 3), keepdims=True)
        - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True) / count
    ) * inv_std[None, :, None, None]
    return gx, grad_gamma, grad_beta


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ShapeError(f"logits must be (N, K) with N >= 1, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"labels must lie in [0, {k})")
    check_finite(logits, "logits")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = float(-log_p[rows, labels].mean())
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    return loss, grad / n
