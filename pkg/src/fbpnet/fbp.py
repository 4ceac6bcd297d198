"""Differentiable filtered-backprojection layer.

``F(x) = reshape(B @ vec(x (*) h), [M, M])`` where ``(*)`` convolves every
sinogram column circularly with the ramp filter ``h``.  ``F`` is linear, so its
vector-Jacobian product is the fixed adjoint ``x -> (B.T g) (*) h`` (``h`` is
even, so correlation and convolution coincide).

By default each column is zero-padded to ``2*M`` before the circular
convolution and cropped back afterwards; ``pad_factor=1`` gives the literal
unpadded circular convolution with ``M`` taps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Geometry, Sinogram, SparseBackprojector, build_backprojector


@dataclass(frozen=True)
class RampFilter:
    taps: np.ndarray

    @property
    def length(self) -> int:
        return self.taps.shape[0]

    def spectrum(self) -> np.ndarray:
        return np.fft.fft(self.taps)

    def to_csv(self, path) -> None:
        np.savetxt(path, self.taps[:, None], delimiter=",", header="tap", comments="")


def make_ramp_filter(length: int) -> RampFilter:
    """Spatial taps whose DFT is ``|w_k|`` on the ``length``-bin frequency grid."""
    if length < 2:
        raise ValueError(f"ramp filter needs at least 2 taps, got {length}")
    taps = np.fft.ifft(np.abs(np.fft.fftfreq(length)))
    if np.max(np.abs(taps.imag)) > 1e-12:
        raise ArithmeticError("ramp filter taps have a non-negligible imaginary part")
    return RampFilter(np.ascontiguousarray(taps.real))


def filter_matrix(h: RampFilter, column_length: int) -> np.ndarray:
    """Dense ``(L, L)`` operator of pad-to-``len(h)`` / circular convolve / crop.

    ``K[i, k] = h[(i - k) mod len(h)]``; symmetric because ``h`` is even.
    """
    if h.length < column_length:
        raise ValueError(f"filter length {h.length} is shorter than the column length {column_length}")
    idx = np.arange(column_length)
    return h.taps[(idx[:, None] - idx[None, :]) % h.length]


def filter_sinogram(x, h: RampFilter, method: str = "spatial"):
    """Circularly convolve every column (axis ``-2``) with the ramp taps.

    Columns shorter than the filter are zero-padded first and cropped after.
    Accepts a ``Sinogram`` (returns one) or an array ``(..., M, N)``.
    """
    data = x.data if isinstance(x, Sinogram) else np.asarray(x, dtype=float)
    m = data.shape[-2]
    if h.length < m:
        raise ValueError(f"column length {m} exceeds filter length {h.length}")
    if method == "spatial":
        out = np.matmul(filter_matrix(h, m), data)
    elif method == "fft":
        spec = np.fft.rfft(h.taps).real
        padded = np.fft.rfft(data, n=h.length, axis=-2)
        out = np.fft.irfft(padded * spec[:, None], n=h.length, axis=-2)[..., :m, :]
    else:
        raise ValueError(f"unknown filtering method {method!r}")
    if isinstance(x, Sinogram):
        return Sinogram(out, x.geometry)
    return out


@dataclass(frozen=True, eq=False)
class FbpLayer:
    geometry: Geometry
    backprojector: SparseBackprojector
    ramp: RampFilter
    _kernel: np.ndarray = field(repr=False)

    @property
    def pad_factor(self) -> int:
        return self.ramp.length // self.geometry.image_size

    def forward(self, x: np.ndarray) -> np.ndarray:
        return fbp_forward(self, x)

    def vjp(self, upstream: np.ndarray) -> np.ndarray:
        return fbp_vjp(self, upstream)


def make_fbp_layer(geom: Geometry, pad_factor: int = 2) -> FbpLayer:
    if pad_factor < 1:
        raise ValueError("pad_factor must be >= 1")
    ramp = make_ramp_filter(pad_factor * geom.image_size)
    return FbpLayer(
        geometry=geom,
        backprojector=build_backprojector(geom),
        ramp=ramp,
        _kernel=filter_matrix(ramp, geom.image_size),
    )


def _as_stack(x, shape: tuple[int, int], what: str) -> tuple[np.ndarray, bool]:
    data = x.data if isinstance(x, Sinogram) else np.asarray(x, dtype=float)
    if data.shape[-2:] != shape or data.ndim not in (2, 3):
        raise ValueError(f"{what} shape {data.shape} does not match {shape}")
    single = data.ndim == 2
    return (data[None] if single else data), single


def fbp_forward(layer: FbpLayer, x) -> np.ndarray:
    """Filtered backprojection of a sinogram ``(M, N)`` or stack ``(B, M, N)``."""
    geom = layer.geometry
    if isinstance(x, Sinogram) and x.geometry != geom:
        raise ValueError("sinogram geometry does not match the layer")
    data, single = _as_stack(x, geom.sinogram_shape, "sinogram")
    filtered = np.matmul(layer._kernel, data)
    flat = filtered.reshape(filtered.shape[0], -1).T
    out = layer.backprojector.apply(flat).T.reshape((data.shape[0],) + geom.image_shape)
    return out[0] if single else out


def fbp_vjp(layer: FbpLayer, upstream) -> np.ndarray:
    """Pull an image-shaped gradient back to sinogram space (the adjoint of ``F``)."""
    geom = layer.geometry
    g, single = _as_stack(upstream, geom.image_shape, "gradient")
    flat = g.reshape(g.shape[0], -1).T
    back = layer.backprojector.apply_transpose(flat).T.reshape((g.shape[0],) + geom.sinogram_shape)
    out = np.matmul(layer._kernel.T, back)
    return out[0] if single else out
