"""Stateless forward/backward kernels on NHWC float64 arrays.

Convolutions are stride-1 "same" cross-correlations (no kernel flip).  Filters
are stored ``(kh, kw, in_ch, out_ch)`` for ``conv2d``.  ``deconv2d`` uses the
transposed-convolution convention ``(kh, kw, out_ch, in_ch)``: its forward map
is the adjoint of ``conv2d`` with the same filter tensor, so
``<conv2d(x, w), y> == <x, deconv2d(y, w)>`` with zero biases.

Each kernel loops over filter taps and does one channel matmul per tap, which
beats an im2col copy for the small channel counts used here.
"""
from __future__ import annotations

import numpy as np


def _check_filter(w: np.ndarray) -> tuple[int, int]:
    if w.ndim != 4:
        raise ValueError(f"filter must be rank 4, got shape {w.shape}")
    kh, kw = w.shape[:2]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"filter spatial size must be odd, got {kh}x{kw}")
    return kh // 2, kw // 2


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


def correlate(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Same-padded cross-correlation ``(B,H,W,Ci) * (kh,kw,Ci,Co) -> (B,H,W,Co)``."""
    ph, pw = _check_filter(w)
    if x.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ValueError(f"input shape {x.shape} does not match filter {w.shape}")
    b, h, wd, _ = x.shape
    xp = _pad(x, ph, pw)
    out = np.zeros((b, h, wd, w.shape[3]))
    for i in range(w.shape[0]):
        for j in range(w.shape[1]):
            out += xp[:, i:i + h, j:j + wd, :] @ w[i, j]
    return out


def correlate_filter_grad(x: np.ndarray, dout: np.ndarray, kshape: tuple[int, int]) -> np.ndarray:
    """Gradient of ``<dout, correlate(x, w)>`` with respect to ``w``."""
    kh, kw = kshape
    ph, pw = kh // 2, kw // 2
    b, h, wd, ci = x.shape
    co = dout.shape[3]
    xp = _pad(x, ph, pw)
    g = dout.reshape(-1, co)
    grad = np.empty((kh, kw, ci, co))
    for i in range(kh):
        for j in range(kw):
            grad[i, j] = xp[:, i:i + h, j:j + wd, :].reshape(-1, ci).T @ g
    return grad


def _adjoint_filter(w: np.ndarray) -> np.ndarray:
    # correlate(., _adjoint_filter(w)) is the adjoint of correlate(., w)
    return np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if b.shape != (w.shape[3],):
        raise ValueError(f"bias shape {b.shape} does not match {w.shape[3]} output channels")
    return correlate(x, w) + b


def conv2d_backward(x: np.ndarray, w: np.ndarray, dout: np.ndarray):
    """Returns ``(dx, dw, db)`` for ``conv2d_forward(x, w, b)``."""
    if dout.shape != x.shape[:3] + (w.shape[3],):
        raise ValueError(f"upstream shape {dout.shape} inconsistent with input {x.shape} and filter {w.shape}")
    dx = correlate(dout, _adjoint_filter(w))
    dw = correlate_filter_grad(x, dout, w.shape[:2])
    db = dout.sum(axis=(0, 1, 2))
    return dx, dw, db


def deconv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stride-1 transposed convolution; ``w`` is ``(kh, kw, out_ch, in_ch)``."""
    if x.ndim != 4 or x.shape[3] != w.shape[3]:
        raise ValueError(f"input shape {x.shape} does not match transposed filter {w.shape}")
    if b.shape != (w.shape[2],):
        raise ValueError(f"bias shape {b.shape} does not match {w.shape[2]} output channels")
    return correlate(x, _adjoint_filter(w)) + b


def deconv2d_backward(x: np.ndarray, w: np.ndarray, dout: np.ndarray):
    """Returns ``(dx, dw, db)`` for ``deconv2d_forward(x, w, b)``."""
    if dout.shape != x.shape[:3] + (w.shape[2],):
        raise ValueError(f"upstream shape {dout.shape} inconsistent with input {x.shape} and filter {w.shape}")
    dx = correlate(dout, w)
    # <dout, deconv(x; w)> = <conv(dout; w), x>
    dw = correlate_filter_grad(dout, x, w.shape[:2])
    db = dout.sum(axis=(0, 1, 2))
    return dx, dw, db


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    """Subgradient 0 at the kink."""
    return np.where(x > 0.0, dout, 0.0)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool,
                      momentum: float = 0.99, eps: float = 1e-3):
    """Per-channel batch normalisation.

    In train mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place as ``m*running + (1-m)*batch``.
    Returns ``(out, cache)``; the cache feeds :func:`batchnorm_backward`.
    """
    if x.shape[-1] != gamma.shape[0]:
        raise ValueError(f"input has {x.shape[-1]} channels, batch norm expects {gamma.shape[0]}")
    if train:
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2")
        axes = (0, 1, 2)
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma, train)


def batchnorm_backward(dout, cache):
    """Returns ``(dx, dgamma, dbeta)``; full batch-statistics gradient in train mode."""
    xhat, inv_std, gamma, train = cache
    axes = (0, 1, 2)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    if not train:
        return dxhat * inv_std, dgamma, dbeta
    n = dout.shape[0] * dout.shape[1] * dout.shape[2]
    dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over the batch of per-sample sums of squared differences."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return float(np.sum(d * d) / a.shape[0])


def mse_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gradient of :func:`mse` with respect to ``a``."""
    return 2.0 * (a - b) / a.shape[0]
