"""Tiny fixed-weight convolutional stack used as a model-free backend.

Three stride-2 3x3 conv+ReLU layers with weights drawn once from a fixed
seed. It is a real product backend, not a test stub: it lets the whole
pipeline run on machines without model assets, at the cost of weaker
features. Outputs are deterministic functions of the input bytes.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_SEED = 20240214
TAP_NAMES = ("tap1", "tap2", "tap3")
_CHANNELS = (8, 16, 32)
_KERNEL = 3
_STRIDE = 2
_PAD = 1


def _init_weights() -> list[tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng(_SEED)
    layers = []
    c_in = 3
    for c_out in _CHANNELS:
        fan_in = c_in * _KERNEL * _KERNEL
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(c_out, c_in, _KERNEL, _KERNEL))
        b = rng.uniform(-0.1, 0.1, size=c_out)
        layers.append((w.astype(np.float32), b.astype(np.float32)))
        c_in = c_out
    return layers


_LAYERS = _init_weights()


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Plain 2-D convolution (cross-correlation) via im2col, float32."""
    c_out, c_in, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    _, h_out, w_out = windows.shape[:3]
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(h_out * w_out, c_in * kh * kw)
    out = cols.astype(np.float32) @ w.reshape(c_out, -1).T.astype(np.float32)
    out += b
    return out.reshape(h_out, w_out, c_out).transpose(2, 0, 1)


def forward(image: np.ndarray) -> dict[str, np.ndarray]:
    """Run the stack on a CxHxW [0,1] image; returns all tap activations."""
    x = np.asarray(image, dtype=np.float32)
    if x.shape[0] == 1:
        x = np.broadcast_to(x, (3,) + x.shape[1:])
    taps: dict[str, np.ndarray] = {}
    for name, (w, b) in zip(TAP_NAMES, _LAYERS):
        x = conv2d(x, w, b, _STRIDE, _PAD)
        x = np.maximum(x, 0.0)
        taps[name] = x
    return taps
