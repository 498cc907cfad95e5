"""Primitive numeric ops on float64 arrays.

A tensor here is just a C-contiguous ``np.ndarray`` of dtype float64; the
shape is the array shape. Spatial activations are ``(H, W, C)`` with channels
last. Every forward op has a ``*_grad`` counterpart taking the upstream
gradient and returning gradients for its inputs.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .errors import NonFiniteError, ShapeError

DEFAULT_EPS = 1e-12


def as_tensor(values, shape=None) -> np.ndarray:
    """Coerce to a contiguous float64 array, optionally checking its shape."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if shape is not None and arr.shape != tuple(shape):
        raise ShapeError(f"expected shape {tuple(shape)}, got {arr.shape}")
    return arr


def check_finite(arr: np.ndarray, what: str = "tensor", node=None) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}", node=node)
    return arr


def _require_hwc(x, name="input"):
    if x.ndim != 3:
        raise ShapeError(f"{name} must be H x W x C, got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty extent: {x.shape}")


def conv_output_hw(H, W, Kh, Kw, stride, pad):
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    if pad < 0:
        raise ShapeError(f"pad must be non-negative, got {pad}")
    if H + 2 * pad < Kh or W + 2 * pad < Kw:
        raise ShapeError(f"kernel {Kh}x{Kw} larger than padded input {H + 2 * pad}x{W + 2 * pad}")
    return (H + 2 * pad - Kh) // stride + 1, (W + 2 * pad - Kw) // stride + 1


def pool_output_hw(H, W, window, stride):
    if window < 1 or stride < 1:
        raise ShapeError(f"window and stride must be positive, got {window}, {stride}")
    if window > H or window > W:
        raise ShapeError(f"pool window {window} larger than input {H}x{W}")
    if stride > H or stride > W:
        raise ShapeError(f"pool stride {stride} larger than input {H}x{W}")
    return (H - window) // stride + 1, (W - window) // stride + 1


# -- convolution -------------------------------------------------------------

def _check_conv(x, kernels, bias, stride, pad):
    _require_hwc(x)
    if kernels.ndim != 4:
        raise ShapeError(f"kernels must be Kh x Kw x Cin x Cout, got {kernels.shape}")
    if kernels.shape[2] != x.shape[2]:
        raise ShapeError(f"input has {x.shape[2]} channels but kernels expect {kernels.shape[2]}")
    if bias.shape != (kernels.shape[3],):
        raise ShapeError(f"bias shape {bias.shape} does not match Cout={kernels.shape[3]}")
    conv_output_hw(x.shape[0], x.shape[1], kernels.shape[0], kernels.shape[1], stride, pad)


def conv2d(x, kernels, bias, stride=1, pad=0, *, kernels_impl=None):
    """Cross-correlation of an ``H x W x Cin`` input with ``Kh x Kw x Cin x Cout`` kernels.

    Output extents are ``floor((H + 2*pad - Kh) / stride) + 1`` (same for W).
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    _check_conv(x, kernels, bias, stride, pad)
    impl = kernels_impl or _kernels.ACTIVE
    return impl.conv2d_forward(x, kernels, bias, stride, pad)


def conv2d_grad(x, kernels, grad_out, stride=1, pad=0, *, kernels_impl=None):
    """Return ``(d_input, d_kernels, d_bias)``."""
    x, kernels, grad_out = as_tensor(x), as_tensor(kernels), as_tensor(grad_out)
    Ho, Wo = conv_output_hw(x.shape[0], x.shape[1], kernels.shape[0], kernels.shape[1], stride, pad)
    if grad_out.shape != (Ho, Wo, kernels.shape[3]):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(Ho, Wo, kernels.shape[3])}")
    impl = kernels_impl or _kernels.ACTIVE
    return impl.conv2d_backward(x, kernels, grad_out, stride, pad)


# -- max pooling -------------------------------------------------------------

def maxpool2d(x, window, stride, *, kernels_impl=None):
    """Windowed maximum per channel.

    Returns ``(out, argmax)`` where ``argmax[i, j, c]`` is the flat spatial index
    ``row * W + col`` of the winning input. Ties go to the lowest flat index.
    """
    x = as_tensor(x)
    _require_hwc(x)
    pool_output_hw(x.shape[0], x.shape[1], window, stride)
    impl = kernels_impl or _kernels.ACTIVE
    return impl.maxpool_forward(x, window, stride)


def maxpool2d_grad(grad_out, argmax, input_shape, *, kernels_impl=None):
    grad_out = as_tensor(grad_out)
    if grad_out.shape != argmax.shape:
        raise ShapeError(f"grad_out {grad_out.shape} and argmax {argmax.shape} disagree")
    impl = kernels_impl or _kernels.ACTIVE
    return impl.maxpool_backward(grad_out, np.ascontiguousarray(argmax, dtype=np.int64), input_shape)


# -- global average pooling --------------------------------------------------

def global_avg_pool(x):
    """``H x W x F`` -> ``1 x 1 x F`` spatial mean."""
    x = as_tensor(x)
    _require_hwc(x)
    return x.mean(axis=(0, 1), keepdims=True)


def global_avg_pool_grad(grad_out, input_shape):
    H, W, F = input_shape
    grad_out = as_tensor(grad_out).reshape(1, 1, F)
    return np.broadcast_to(grad_out / (H * W), (H, W, F)).copy()


# -- L2 normalization --------------------------------------------------------

def l2_normalize(x, eps=DEFAULT_EPS):
    """``x / max(||x||, eps)``; the zero vector maps to zero."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = as_tensor(x)
    return x / max(float(np.linalg.norm(x.ravel())), eps)


def l2_normalize_grad(x, grad_out, eps=DEFAULT_EPS):
    """Full Jacobian-vector product of :func:`l2_normalize`.

    For ``n = ||x|| >= eps``: ``(g - y * <y, g>) / n`` with ``y = x / n``.
    Below the guard the op is the linear map ``x / eps``.
    """
    x = as_tensor(x)
    g = as_tensor(grad_out).reshape(x.shape)
    n = float(np.linalg.norm(x.ravel()))
    if n < eps:
        return g / eps
    y = x / n
    return (g - y * float(np.dot(y.ravel(), g.ravel()))) / n


# -- fully connected ---------------------------------------------------------

def fully_connected(x, weights, bias):
    """``x^T W + b`` for a length-F input (any shape with F elements)."""
    x, weights, bias = as_tensor(x).ravel(), as_tensor(weights), as_tensor(bias)
    if weights.ndim != 2 or weights.shape[0] != x.size:
        raise ShapeError(f"weights {weights.shape} incompatible with input of length {x.size}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"bias {bias.shape} incompatible with weights {weights.shape}")
    return x @ weights + bias


def fully_connected_grad(x, weights, grad_out):
    """Return ``(d_input, d_weights, d_bias)``; ``d_input`` has the shape of ``x``."""
    x, weights, grad_out = as_tensor(x), as_tensor(weights), as_tensor(grad_out)
    dx = (weights @ grad_out).reshape(x.shape)
    dw = np.outer(x.ravel(), grad_out)
    return dx, dw, grad_out.copy()


# -- add ---------------------------------------------------------------------

def add_n(inputs):
    if len(inputs) == 0:
        raise ShapeError("add_n needs at least one input")
    arrs = [as_tensor(a) for a in inputs]
    shape = arrs[0].shape
    for a in arrs[1:]:
        if a.shape != shape:
            raise ShapeError(f"add_n shape mismatch: {shape} vs {a.shape}")
    out = arrs[0].copy()
    for a in arrs[1:]:
        out += a
    return out


def add_n_grad(grad_out, n_inputs):
    """Each input receives the upstream gradient unchanged (local gradient is 1)."""
    return [grad_out for _ in range(n_inputs)]


# -- softmax cross-entropy ---------------------------------------------------

def softmax(logits):
    z = as_tensor(logits) - np.max(logits)
    e = np.exp(z)
    return e / e.sum()


def softmax_cross_entropy(logits, label):
    """Return ``(loss, grad_logits)`` for one example."""
    logits = as_tensor(logits).ravel()
    K = logits.size
    if not 0 <= int(label) < K:
        raise IndexError(f"label {label} out of range for {K} classes")
    shifted = logits - logits.max()
    log_z = np.log(np.exp(shifted).sum())
    loss = float(log_z - shifted[label])
    grad = np.exp(shifted - log_z)
    grad[label] -= 1.0
    return loss, grad
