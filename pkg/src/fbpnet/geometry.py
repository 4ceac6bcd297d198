"""Parallel-beam geometry, the pixel-driven Radon transform and the sparse
backprojection matrix.

Conventions
-----------
Images are ``(M, M)`` arrays indexed ``[row, col]``; pixel ``(r, c)`` sits at
``x = c - (M-1)/2``, ``y = (M-1)/2 - r`` around the rotation center.
Sinograms are ``(M, N)`` arrays indexed ``[detector_bin, angle]``; bin ``k``
has signed offset ``s_k = k - (M-1)/2``.  A pixel projects onto offset
``s = x cos(theta) + y sin(theta)`` and spreads over the two neighbouring bins
with linear interpolation weights.

Vectorisation is row-major throughout: pixel ``(r, c)`` is row ``r*M + c`` of
the backprojector and sinogram entry ``(i, j)`` is column ``i*N + j``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import scipy.sparse as sp

AngleSpec = Union[int, str, Sequence[float]]


@dataclass(frozen=True)
class Geometry:
    """Discrete 2-D parallel-beam geometry with ``image_size`` detector bins."""

    image_size: int
    angles: tuple[float, ...]
    detector_pitch: float = 1.0

    def __post_init__(self):
        if not isinstance(self.image_size, (int, np.integer)) or self.image_size < 1:
            raise ValueError(f"image_size must be a positive integer, got {self.image_size!r}")
        if len(self.angles) < 1:
            raise ValueError("geometry needs at least one projection angle")
        a = np.asarray(self.angles, dtype=float)
        if not np.all(np.isfinite(a)) or a.min() < 0.0 or a.max() >= math.pi:
            raise ValueError("projection angles must lie in [0, pi)")
        if np.any(np.diff(a) <= 0.0):
            raise ValueError("projection angles must be strictly increasing (no duplicates)")
        if self.detector_pitch != 1.0:
            raise ValueError("detector pitch is fixed to one pixel")

    @property
    def num_angles(self) -> int:
        return len(self.angles)

    @property
    def detector_count(self) -> int:
        return self.image_size

    @property
    def center(self) -> float:
        return (self.image_size - 1) / 2.0

    @property
    def sinogram_shape(self) -> tuple[int, int]:
        return (self.image_size, self.num_angles)

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.image_size, self.image_size)

    def detector_offsets(self) -> np.ndarray:
        return np.arange(self.image_size) - self.center

    def to_dict(self) -> dict:
        return {"image_size": self.image_size, "angles": list(self.angles)}


def _parse_angles(angle_spec: AngleSpec) -> tuple[float, ...]:
    if isinstance(angle_spec, str):
        spec = angle_spec.strip()
        if not (spec.startswith("uniform(") and spec.endswith(")")):
            raise ValueError(f"unrecognised angle spec {angle_spec!r}")
        angle_spec = int(spec[len("uniform("):-1])
    if isinstance(angle_spec, (int, np.integer)):
        n = int(angle_spec)
        if n < 1:
            raise ValueError(f"number of angles must be positive, got {n}")
        return tuple(k * math.pi / n for k in range(n))
    return tuple(float(a) for a in angle_spec)


def make_geometry(image_size: int, angle_spec: AngleSpec) -> Geometry:
    """Build a geometry from an explicit angle list, an int N or ``"uniform(N)"``.

    Uniform specs give angles ``k*pi/N`` for ``k = 0..N-1``.
    """
    if not isinstance(image_size, (int, np.integer)) or image_size < 8:
        raise ValueError(f"image_size must be an integer >= 8, got {image_size!r}")
    return Geometry(int(image_size), _parse_angles(angle_spec))


def circle_mask(size: int) -> np.ndarray:
    """Boolean mask of the pixels whose centers lie in the inscribed circle."""
    c = (size - 1) / 2.0
    r, col = np.mgrid[0:size, 0:size]
    return (col - c) ** 2 + (c - r) ** 2 <= c * c + 1e-9


@dataclass(frozen=True)
class Sinogram:
    """Samples ``(M, N)`` tied to the geometry they were measured with."""

    data: np.ndarray
    geometry: Geometry

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.shape != self.geometry.sinogram_shape:
            raise ValueError(
                f"sinogram shape {data.shape} does not match geometry {self.geometry.sinogram_shape}"
            )
        if not np.all(np.isfinite(data)):
            raise ValueError("sinogram contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class SparseBackprojector:
    """The backprojection matrix ``B`` of shape ``(M*M, M*N)``.

    ``interp`` holds the raw linear-interpolation weights (each in-circle pixel
    gets weights summing to one per angle); ``B = scale * interp`` with
    ``scale = pi / N``.  Forward projection uses ``interp.T`` so that the
    projector and the unscaled backprojector are exact adjoints.
    """

    geometry: Geometry
    interp: sp.csr_matrix
    scale: float
    _interp_t: sp.csr_matrix = field(repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.interp.shape

    @property
    def nnz(self) -> int:
        return self.interp.nnz

    @property
    def matrix(self) -> sp.csr_matrix:
        """``B`` itself, with the ``pi/N`` factor folded into the weights."""
        return (self.interp * self.scale).tocsr()

    def to_dense(self) -> np.ndarray:
        return self.interp.toarray() * self.scale

    def apply(self, columns: np.ndarray) -> np.ndarray:
        """``B @ columns`` for a ``(M*N,)`` vector or ``(M*N, k)`` block."""
        return self.scale * (self.interp @ columns)

    def apply_transpose(self, columns: np.ndarray) -> np.ndarray:
        """``B.T @ columns`` for a ``(M*M,)`` vector or ``(M*M, k)`` block."""
        return self.scale * (self._interp_t @ columns)

    def export_text(self, path: str | Path) -> None:
        """Write ``row col weight`` lines sorted by ``(row, col)``."""
        m = self.matrix
        m.sort_indices()
        rows = np.repeat(np.arange(m.shape[0]), np.diff(m.indptr))
        with open(path, "w") as fh:
            for r, c, w in zip(rows, m.indices, m.data):
                fh.write(f"{r} {c} {float(w)!r}\n")


def _interpolation_matrix(geom: Geometry) -> sp.csr_matrix:
    m, n = geom.image_size, geom.num_angles
    c = geom.center
    mask = circle_mask(m)
    pix = np.flatnonzero(mask)
    r, col = np.divmod(pix, m)
    xs = col - c
    ys = c - r

    theta = np.asarray(geom.angles)
    # (n_pix, n_angles) fractional detector coordinate
    t = xs[:, None] * np.cos(theta)[None, :] + ys[:, None] * np.sin(theta)[None, :] + c
    # in-circle pixels satisfy |s| <= c, so t in [0, M-1] up to round-off
    t = np.clip(t, 0.0, m - 1)
    lo = np.minimum(np.floor(t).astype(np.int64), m - 2 if m > 1 else 0)
    frac = t - lo
    j = np.broadcast_to(np.arange(n), t.shape)
    rows = np.broadcast_to(pix[:, None], t.shape)

    all_rows = np.concatenate([rows.ravel(), rows.ravel()])
    all_cols = np.concatenate([(lo * n + j).ravel(), ((lo + 1) * n + j).ravel()])
    all_w = np.concatenate([(1.0 - frac).ravel(), frac.ravel()])
    keep = all_w > 0.0
    mat = sp.coo_matrix(
        (all_w[keep], (all_rows[keep], all_cols[keep])), shape=(m * m, m * n)
    ).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


@lru_cache(maxsize=16)
def build_backprojector(geom: Geometry) -> SparseBackprojector:
    """Assemble ``B`` for ``geom`` (cached per geometry)."""
    interp = _interpolation_matrix(geom)
    return SparseBackprojector(
        geometry=geom,
        interp=interp,
        scale=math.pi / geom.num_angles,
        _interp_t=interp.T.tocsr(),
    )


def radon_forward(image: np.ndarray, geom: Geometry) -> Sinogram:
    """Pixel-driven line integrals of the circle-masked image."""
    image = np.asarray(image, dtype=float)
    if image.shape != geom.image_shape:
        raise ValueError(f"image shape {image.shape} does not match geometry {geom.image_shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    bp = build_backprojector(geom)
    # rows outside the circle are empty, so the mask is implicit in interp.T
    samples = bp._interp_t @ image.ravel()
    return Sinogram(samples.reshape(geom.sinogram_shape), geom)


def radon_batch(images: np.ndarray, geom: Geometry) -> np.ndarray:
    """Project a stack ``(B, M, M)`` to ``(B, M, N)``."""
    images = np.asarray(images, dtype=float)
    bp = build_backprojector(geom)
    flat = images.reshape(images.shape[0], -1).T
    return (bp._interp_t @ flat).T.reshape((images.shape[0],) + geom.sinogram_shape)


def backproject(bp: SparseBackprojector, x: Sinogram | np.ndarray) -> np.ndarray:
    """``reshape(B @ vec(x), [M, M])``; also accepts a stack ``(B, M, N)``."""
    data = x.data if isinstance(x, Sinogram) else np.asarray(x, dtype=float)
    geom = bp.geometry
    if data.shape[-2:] != geom.sinogram_shape:
        raise ValueError(f"sinogram shape {data.shape} does not match {geom.sinogram_shape}")
    if data.ndim == 2:
        return bp.apply(data.ravel()).reshape(geom.image_shape)
    flat = data.reshape(data.shape[0], -1).T
    return bp.apply(flat).T.reshape((data.shape[0],) + geom.image_shape)


def backproject_unscaled(bp: SparseBackprojector, x: Sinogram | np.ndarray) -> np.ndarray:
    """Backprojection without the ``pi/N`` factor: the exact adjoint of the projector."""
    data = x.data if isinstance(x, Sinogram) else np.asarray(x, dtype=float)
    return (bp.interp @ data.ravel()).reshape(bp.geometry.image_shape)
