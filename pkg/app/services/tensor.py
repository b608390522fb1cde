"""Dense-array kernels: matrix product, valid cross-correlation and flips.

Arrays are plain numpy ndarrays in row-major order. Every kernel preserves
the dtype of its inputs, so the network trains in float32 while gradient
checks run the same code in float64.
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.exceptions import DimensionError

Tensor = np.ndarray


@dataclass
class ConvCache:
    cols: np.ndarray
    kernels: np.ndarray
    input_shape: Tuple[int, ...]
    batched: bool


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [m, k] and a [k, n] array."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"Cannot multiply shapes {tuple(a.shape)} and {tuple(b.shape)}",
            details={"a": list(a.shape), "b": list(b.shape)},
        )
    return np.matmul(a, b)


def im2col(x: Tensor, k: int) -> Tensor:
    """Lower [N, C, H, W] to [N*Ho*Wo, C*k*k] rows, one per output position.

    Row order is (n, y, x); column order is (c, ky, kx), matching a kernel
    tensor reshaped to [C_out, C*k*k].
    """
    n, c, h, w = x.shape
    out_h, out_w = h - k + 1, w - k + 1
    windows = sliding_window_view(x, (k, k), axis=(2, 3))  # [N, C, Ho, Wo, k, k]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c * k * k)


def col2im(cols: Tensor, input_shape: Tuple[int, int, int, int], k: int) -> Tensor:
    """Scatter-add im2col rows back onto an input-shaped array."""
    n, c, h, w = input_shape
    out_h, out_w = h - k + 1, w - k + 1
    cols = cols.reshape(n, out_h, out_w, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros(input_shape, dtype=cols.dtype)
    for y in range(k):
        for x in range(k):
            img[:, :, y:y + out_h, x:x + out_w] += cols[:, :, y, x, :, :]
    return img


def _check_conv_shapes(x: Tensor, kernels: Tensor, bias: Tensor) -> None:
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise DimensionError("Kernels must be [C_out, C_in, k, k]", details={"kernels": list(kernels.shape)})
    if x.ndim != 4:
        raise DimensionError("Input must be [C, H, W] or [N, C, H, W]", details={"input": list(x.shape)})
    c_out, c_in, k, _ = kernels.shape
    if x.shape[1] != c_in:
        raise DimensionError(
            f"Input has {x.shape[1]} channels, kernels expect {c_in}",
            details={"input": list(x.shape), "kernels": list(kernels.shape)},
        )
    if x.shape[2] < k or x.shape[3] < k:
        raise DimensionError(
            f"Input {x.shape[2]}x{x.shape[3]} is smaller than the {k}x{k} kernel",
            details={"input": list(x.shape), "kernels": list(kernels.shape)},
        )
    if bias.shape != (c_out,):
        raise DimensionError("Bias must have one entry per output channel",
                             details={"bias": list(bias.shape), "kernels": list(kernels.shape)})


def conv2d_forward(x: Tensor, kernels: Tensor, bias: Tensor) -> Tuple[Tensor, ConvCache]:
    """Valid cross-correlation (no kernel flip) plus per-channel bias.

    Accepts a single [C_in, H, W] image or a [N, C_in, H, W] batch and
    returns the output in the same layout together with the backward cache.
    """
    batched = x.ndim == 4
    if x.ndim == 3:
        x = x[np.newaxis]
    _check_conv_shapes(x, kernels, bias)

    n, _, h, w = x.shape
    c_out, _, k, _ = kernels.shape
    out_h, out_w = h - k + 1, w - k + 1

    cols = im2col(x, k)
    out = cols @ kernels.reshape(c_out, -1).T + bias
    out = np.ascontiguousarray(out.reshape(n, out_h, out_w, c_out).transpose(0, 3, 1, 2))

    cache = ConvCache(cols=cols, kernels=kernels, input_shape=x.shape, batched=batched)
    return (out if batched else out[0]), cache


def conv2d_valid(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Output of shape [C_out, H-k+1, W-k+1] (batch dimension kept if given)."""
    return conv2d_forward(x, kernels, bias)[0]


def conv2d_backward(
    cache: ConvCache, grad_out: Tensor, need_input_grad: bool = True
) -> Tuple[Optional[Tensor], Tensor, Tensor]:
    """Exact gradients of `conv2d_forward` wrt input, kernels and bias.

    With `need_input_grad=False` the input gradient is skipped and None is
    returned in its place (used below the lowest trainable layer).
    """
    if not cache.batched:
        grad_out = grad_out[np.newaxis]
    n, _, h, w = cache.input_shape
    c_out, _, k, _ = cache.kernels.shape
    expected = (n, c_out, h - k + 1, w - k + 1)
    if grad_out.shape != expected:
        raise DimensionError(
            "Output gradient does not match forward output shape",
            details={"expected": list(expected), "got": list(grad_out.shape)},
        )

    g2 = grad_out.transpose(0, 2, 3, 1).reshape(-1, c_out)
    grad_kernels = (g2.T @ cache.cols).reshape(cache.kernels.shape)
    grad_bias = g2.sum(axis=0)

    grad_input = None
    if need_input_grad:
        grad_cols = g2 @ cache.kernels.reshape(c_out, -1)
        grad_input = col2im(grad_cols, cache.input_shape, k)
        if not cache.batched:
            grad_input = grad_input[0]
    return grad_input, grad_kernels, grad_bias


def flip_horizontal(patch: Tensor) -> Tensor:
    """Reverse column order in every channel (left-right mirror)."""
    return np.ascontiguousarray(patch[..., ::-1])
