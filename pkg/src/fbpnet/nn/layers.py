"""Layer objects that hold parameters and cache what their backward pass needs."""
from __future__ import annotations

import numpy as np

from . import functional as F


class Parameter:
    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value, dtype=float)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d:
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator):
        self.weight = Parameter(he_normal(rng, (kernel, kernel, in_ch, out_ch), kernel * kernel * in_ch))
        self.bias = Parameter(np.zeros(out_ch))
        self._x = None

    def parameters(self) -> dict[str, Parameter]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._x = x
        return F.conv2d_forward(x, self.weight.value, self.bias.value)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dx, dw, db = F.conv2d_backward(self._x, self.weight.value, dout)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class Deconv2d:
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator):
        self.weight = Parameter(he_normal(rng, (kernel, kernel, out_ch, in_ch), kernel * kernel * in_ch))
        self.bias = Parameter(np.zeros(out_ch))
        self._x = None

    def parameters(self) -> dict[str, Parameter]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._x = x
        return F.deconv2d_forward(x, self.weight.value, self.bias.value)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dx, dw, db = F.deconv2d_backward(self._x, self.weight.value, dout)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class BatchNorm:
    """Learnable scale/shift plus running statistics (stored as non-trainable parameters)."""

    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-3):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if eps <= 0:
            raise ValueError("epsilon must be positive")
        self.scale = Parameter(np.ones(channels))
        self.shift = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self._cache = None

    def parameters(self) -> dict[str, Parameter]:
        return {"scale": self.scale, "shift": self.shift}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        out, self._cache = F.batchnorm_forward(
            x, self.scale.value, self.shift.value, self.running_mean, self.running_var,
            train, self.momentum, self.eps,
        )
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dx, dg, db = F.batchnorm_backward(dout, self._cache)
        self.scale.grad += dg
        self.shift.grad += db
        return dx


class ReLU:
    def __init__(self):
        self._x = None

    def parameters(self) -> dict[str, Parameter]:
        return {}

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._x = x
        return F.relu_forward(x)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return F.relu_backward(self._x, dout)
