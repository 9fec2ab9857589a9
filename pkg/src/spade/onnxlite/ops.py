"""Numpy kernels for the supported ONNX operators. NCHW layout, float32."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ModelLoadError


def _pair(attr, default):
    if attr is None:
        return default
    return tuple(int(v) for v in attr)


def conv(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, attrs: dict) -> np.ndarray:
    strides = _pair(attrs.get("strides"), (1, 1))
    dilations = _pair(attrs.get("dilations"), (1, 1))
    pads = _pair(attrs.get("pads"), (0, 0, 0, 0))
    group = int(attrs.get("group", 1))
    if dilations != (1, 1) or group != 1:
        raise ModelLoadError("conv supports dilation 1 and group 1 only")
    n, c_in, _, _ = x.shape
    c_out, c_in_w, kh, kw = w.shape
    if c_in_w != c_in:
        raise ModelLoadError(f"conv weight expects {c_in_w} channels, input has {c_in}")
    xp = np.pad(x, ((0, 0), (0, 0), (pads[0], pads[2]), (pads[1], pads[3])))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, :: strides[0], :: strides[1]]
    _, _, h_out, w_out = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c_in * kh * kw)
    # float64 accumulation keeps deep stacks within parity tolerance of the
    # source framework; storage stays float32.
    out = cols.astype(np.float64) @ w.reshape(c_out, -1).T.astype(np.float64)
    if b is not None:
        out += b.astype(np.float64)
    return out.reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2).astype(np.float32)


def max_pool(x: np.ndarray, attrs: dict) -> np.ndarray:
    kh, kw = _pair(attrs.get("kernel_shape"), None)
    strides = _pair(attrs.get("strides"), (1, 1))
    pads = _pair(attrs.get("pads"), (0, 0, 0, 0))
    fill = np.finfo(x.dtype).min if np.issubdtype(x.dtype, np.floating) else np.iinfo(x.dtype).min
    xp = np.pad(
        x,
        ((0, 0), (0, 0), (pads[0], pads[2]), (pads[1], pads[3])),
        constant_values=fill,
    )
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, :: strides[0], :: strides[1]]
    return windows.max(axis=(4, 5))


def batch_norm(x, scale, bias, mean, var, attrs: dict) -> np.ndarray:
    eps = float(attrs.get("epsilon", 1e-5))
    shape = (1, x.shape[1], 1, 1)
    inv = 1.0 / np.sqrt(var.astype(np.float64) + eps)
    gain = (scale.astype(np.float64) * inv).reshape(shape)
    shift = (bias.astype(np.float64) - mean.astype(np.float64) * scale.astype(np.float64) * inv).reshape(shape)
    return (x.astype(np.float64) * gain + shift).astype(np.float32)


def global_average_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3), keepdims=True).astype(x.dtype)


def flatten(x: np.ndarray, attrs: dict) -> np.ndarray:
    axis = int(attrs.get("axis", 1))
    lead = int(np.prod(x.shape[:axis])) if axis else 1
    return x.reshape(lead, -1)


def gemm(a, b, c, attrs: dict) -> np.ndarray:
    alpha = np.float32(attrs.get("alpha", 1.0))
    beta = np.float32(attrs.get("beta", 1.0))
    if int(attrs.get("transA", 0)):
        a = a.T
    if int(attrs.get("transB", 0)):
        b = b.T
    out = alpha * (a @ b)
    if c is not None:
        out = out + beta * c
    return out
