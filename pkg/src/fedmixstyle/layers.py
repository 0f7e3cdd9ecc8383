"""Array-level building blocks: convolution, batch norm, pooling, the
nearest-centroid head and the cross-entropy loss, each with its backward.

All functions keep the dtype of their inputs, so the same code runs in
float32 for the model and in float64 for finite-difference checks.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgument


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise InvalidArgument(msg)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # N, C, H', W', kh, kw


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Zero-padded 2-D cross-correlation. ``x`` is NCHW, ``w`` is OCkHkW."""
    _require(x.ndim == 4 and w.ndim == 4, "conv2d expects 4-d input and weight")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    _require(c == cw, f"input has {c} channels, weight expects {cw}")
    _require(b.shape == (o,), f"bias shape {b.shape} != ({o},)")
    _require(stride >= 1 and padding >= 0, "stride must be >= 1 and padding >= 0")
    _require(h + 2 * padding >= kh and wd + 2 * padding >= kw, "kernel larger than padded input")
    win = _windows(x, kh, kw, stride, padding)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, H', W', O
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, dout: np.ndarray, stride: int, padding: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dw, db) for ``conv2d(x, w, b, stride, padding)``."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    _, _, ho, wo = dout.shape
    win = _windows(x, kh, kw, stride, padding)
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))  # O, C, kh, kw
    db = dout.sum(axis=(0, 2, 3))
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(dout, w[:, :, i, j], axes=([1], [0]))  # N, H', W', C
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib.transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
    return np.ascontiguousarray(dx), dw.astype(w.dtype, copy=False), db.astype(w.dtype, copy=False)


def batch_moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population variance over the N, H, W axes.

    Reductions accumulate in float64 and the result is cast back to the
    input dtype.
    """
    _require(x.ndim == 4, "batch_moments expects NCHW input")
    n, c, h, w = x.shape
    _require(n * h * w >= 1, "batch_moments needs at least one value per channel")
    x64 = x.astype(np.float64, copy=False)
    mean = x64.mean(axis=(0, 2, 3))
    var = ((x64 - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    return mean.astype(x.dtype), var.astype(x.dtype)


def bn_forward(
    x: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    eps: float,
) -> np.ndarray:
    y, _, _ = bn_forward_cached(x, mean, var, gamma, beta, eps)
    return y


def bn_forward_cached(x, mean, var, gamma, beta, eps):
    """Same as :func:`bn_forward` but also returns (x_hat, inv_std)."""
    _require(x.ndim == 4, "bn_forward expects NCHW input")
    c = x.shape[1]
    for name, v in (("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)):
        _require(np.shape(v) == (c,), f"{name} must have shape ({c},)")
    _require(eps >= 0, "eps must be non-negative")
    _require(bool(np.all(var >= 0)), "variance must be non-negative")
    _require(bool(np.all(var + eps > 0)), "variance + eps must be positive")
    dt = x.dtype
    inv = (1.0 / np.sqrt(var.astype(dt) + dt.type(eps))).astype(dt)
    xhat = (x - mean.astype(dt)[None, :, None, None]) * inv[None, :, None, None]
    y = gamma.astype(dt)[None, :, None, None] * xhat + beta.astype(dt)[None, :, None, None]
    return y, xhat, inv


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3))


def nearest_centroid_logits(features: np.ndarray, prototypes: np.ndarray, temperature: float) -> np.ndarray:
    """logit[n, c] = -||features[n] - prototypes[c]||^2 / temperature."""
    _require(temperature > 0, "temperature must be positive")
    _require(features.ndim == 2 and prototypes.ndim == 2, "features and prototypes must be 2-d")
    _require(features.shape[1] == prototypes.shape[1], "feature dimension mismatch")
    diff = features[:, None, :] - prototypes[None, :, :]
    return -(diff * diff).sum(axis=2) / features.dtype.type(temperature)


def nearest_centroid_backward(features, prototypes, temperature, dlogits):
    """Returns (dfeatures, dprototypes)."""
    diff = features[:, None, :] - prototypes[None, :, :]  # N, L, F
    scale = features.dtype.type(2.0 / temperature)
    weighted = dlogits[:, :, None] * diff
    dfeat = -scale * weighted.sum(axis=1)
    dproto = scale * weighted.sum(axis=0)
    return dfeat, dproto


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    _require(logits.ndim == 2, "logits must be 2-d")
    labels = np.asarray(labels)
    n, n_classes = logits.shape
    _require(n >= 1, "empty batch")
    _require(labels.shape == (n,), "labels must have one entry per row")
    _require(bool(np.all((labels >= 0) & (labels < n_classes))), "label out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sumexp = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(sumexp)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].astype(np.float64).mean())
    grad = ez / sumexp
    grad[rows, labels] -= 1
    grad /= logits.dtype.type(n)
    return loss, grad


def init_prototypes(features: np.ndarray, labels, n_classes: int) -> np.ndarray:
    """Class means of ``features``; every class must be present."""
    labels = np.asarray(labels)
    _require(features.ndim == 2 and labels.shape == (features.shape[0],), "features/labels shape mismatch")
    protos = np.zeros((n_classes, features.shape[1]), dtype=features.dtype)
    for c in range(n_classes):
        mask = labels == c
        _require(bool(mask.any()), f"class {c} has no samples")
        protos[c] = features[mask].astype(np.float64).mean(axis=0)
    return protos
