"""Low-dose noise model and sparse-view angle protocols."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Geometry, Sinogram

TRANSMISSION_FLOOR = 1e-12


@dataclass(frozen=True)
class NoiseParams:
    b: float = 1e7
    var: float = 0.002
    seed: int = 0

    def __post_init__(self):
        if not self.b > 0:
            raise ValueError(f"photon scale b must be positive, got {self.b}")
        if not self.var >= 0:
            raise ValueError(f"Gaussian variance must be non-negative, got {self.var}")

    def rng(self, *stream: int) -> np.random.Generator:
        """Counter-based generator keyed by the seed plus optional stream ids."""
        seq = np.random.SeedSequence([int(self.seed) & 0xFFFFFFFFFFFFFFFF, *stream])
        return np.random.Generator(np.random.Philox(seq))


def _check_clean(y: np.ndarray) -> float:
    if np.any(y < 0):
        raise ValueError("clean sinogram has negative entries")
    peak = float(y.max())
    if peak <= 0:
        raise ValueError("clean sinogram is all zero; max(y) is undefined")
    return peak


def transmission(y, p: NoiseParams, poisson: str = "sample", rng: np.random.Generator | None = None) -> np.ndarray:
    """Noisy transmission ``Poisson(b*exp(-y/max y))/b + Gaussian(0, var)``, unclamped.

    ``poisson="mean"`` replaces the Poisson draw by its mean (deterministic test mode).
    """
    y = np.asarray(y.data if isinstance(y, Sinogram) else y, dtype=float)
    peak = _check_clean(y)
    if rng is None:
        rng = p.rng()
    expected = p.b * np.exp(-y / peak)
    if poisson == "sample":
        counts = rng.poisson(expected).astype(float)
    elif poisson == "mean":
        counts = expected
    else:
        raise ValueError(f"unknown poisson mode {poisson!r}")
    z = counts / p.b
    if p.var > 0:
        z = z + rng.normal(0.0, math.sqrt(p.var), size=y.shape)
    return z


def degrade(y, p: NoiseParams, poisson: str = "sample", rng: np.random.Generator | None = None):
    """Apply the Poisson + Gaussian transmission noise and convert back to line integrals.

    ``x = -max(y) * log(clamp(z, 1e-12, 1))``.  Returns a ``Sinogram`` when given
    one, otherwise an array.
    """
    data = np.asarray(y.data if isinstance(y, Sinogram) else y, dtype=float)
    peak = _check_clean(data)
    z = np.clip(transmission(data, p, poisson=poisson, rng=rng), TRANSMISSION_FLOOR, 1.0)
    x = -peak * np.log(z)
    # log(1) is exactly 0, but -0.0 is untidy
    x[x == 0] = 0.0
    if isinstance(y, Sinogram):
        return Sinogram(x, y.geometry)
    return x


def subsample_angles(y: Sinogram, stride: int) -> Sinogram:
    """Keep every ``stride``-th projection, angles included."""
    n = y.geometry.num_angles
    if stride < 1 or n % stride:
        raise ValueError(f"stride {stride} does not divide the {n} projection angles")
    geom = Geometry(y.geometry.image_size, y.geometry.angles[::stride])
    return Sinogram(y.data[:, ::stride], geom)


def interpolate_angles(y: Sinogram, target_n: int) -> Sinogram:
    """Linearly interpolate along the angle axis onto ``target_n`` uniform angles.

    Target angles beyond the last source angle interpolate towards the
    pi-periodic neighbour ``p(s, theta0 + pi) = p(-s, theta0)``, i.e. the first
    column flipped along the detector axis.
    """
    src_n = y.geometry.num_angles
    if target_n < src_n:
        raise ValueError(f"target angle count {target_n} is smaller than the source count {src_n}")
    src = np.asarray(y.geometry.angles)
    target = np.arange(target_n) * math.pi / target_n
    if target[0] < src[0]:
        raise ValueError("target grid starts before the first source angle")

    ext_angles = np.append(src, src[0] + math.pi)
    ext = np.concatenate([y.data, y.data[::-1, :1]], axis=1)
    hi = np.searchsorted(ext_angles, target, side="right")
    hi = np.clip(hi, 1, src_n)
    lo = hi - 1
    w = (target - ext_angles[lo]) / (ext_angles[hi] - ext_angles[lo])
    out = ext[:, lo] * (1.0 - w) + ext[:, hi] * w
    # nodes are reproduced bit-exactly
    exact = w == 0.0
    out[:, exact] = ext[:, lo[exact]]
    geom = Geometry(y.geometry.image_size, tuple(float(a) for a in target))
    return Sinogram(out, geom)
