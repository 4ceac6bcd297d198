"""Synthetic phantoms and grayscale image ingestion, all stretched to [0, 255]."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Modified Shepp-Logan: (x0, y0, semi-axis a, semi-axis b, rotation deg, additive intensity)
SHEPP_LOGAN = (
    (0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
    (0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8),
    (0.22, 0.0, 0.11, 0.31, -18.0, -0.2),
    (-0.22, 0.0, 0.16, 0.41, 18.0, -0.2),
    (0.0, 0.35, 0.21, 0.25, 0.0, 0.1),
    (0.0, 0.1, 0.046, 0.046, 0.0, 0.1),
    (0.0, -0.1, 0.046, 0.046, 0.0, 0.1),
    (-0.08, -0.605, 0.046, 0.023, 0.0, 0.1),
    (0.0, -0.605, 0.023, 0.023, 0.0, 0.1),
    (0.06, -0.605, 0.023, 0.046, 0.0, 0.1),
)


def _grid(size: int, supersample: int) -> tuple[np.ndarray, np.ndarray]:
    """Sub-pixel sample coordinates in [-1, 1], shaped (size, size, s*s)."""
    s = supersample
    offs = (np.arange(s) + 0.5) / s - 0.5
    idx = np.arange(size)
    cols = idx[None, :, None, None] + offs[None, None, None, :]
    rows = idx[:, None, None, None] + offs[None, None, :, None]
    half = size / 2.0
    x = (cols - (size - 1) / 2.0) / half
    y = ((size - 1) / 2.0 - rows) / half
    x, y = np.broadcast_arrays(x, y)
    return x.reshape(size, size, s * s), y.reshape(size, size, s * s)


def _ellipse(x, y, x0, y0, a, b, phi_deg) -> np.ndarray:
    phi = math.radians(phi_deg)
    c, s = math.cos(phi), math.sin(phi)
    dx, dy = x - x0, y - y0
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def render_ellipses(size: int, ellipses, supersample: int = 4) -> np.ndarray:
    """Sum of uniform ellipses, area-averaged over ``supersample**2`` points per pixel."""
    x, y = _grid(size, supersample)
    img = np.zeros(x.shape)
    for x0, y0, a, b, phi, val in ellipses:
        img += val * _ellipse(x, y, x0, y0, a, b, phi)
    return img.mean(axis=2)


def stretch(img: np.ndarray) -> np.ndarray:
    """Linear map of ``[min, max]`` onto ``[0, 255]``."""
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        raise ValueError("cannot stretch a constant image")
    return (img - lo) * (255.0 / (hi - lo))


def shepp_logan(size: int, supersample: int = 4) -> np.ndarray:
    return stretch(render_ellipses(size, SHEPP_LOGAN, supersample))


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "random-ellipses"
    count: int = 1
    size: int = 64
    ellipse_range: tuple[int, int] = (3, 8)
    intensity_range: tuple[float, float] = (-0.3, 0.6)
    seed: int = 0
    supersample: int = 4

    def validate(self) -> None:
        if self.kind not in ("shepp-logan", "random-ellipses"):
            raise ValueError(f"unknown phantom kind {self.kind!r}")
        if self.count < 1 or self.size < 8:
            raise ValueError("need count >= 1 and size >= 8")
        lo, hi = self.ellipse_range
        if not 0 <= lo <= hi:
            raise ValueError(f"invalid ellipse-count range {self.ellipse_range}")
        if not self.intensity_range[0] <= self.intensity_range[1]:
            raise ValueError(f"invalid intensity range {self.intensity_range}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "count": self.count, "size": self.size,
            "ellipse_range": list(self.ellipse_range), "intensity_range": list(self.intensity_range),
            "seed": self.seed, "supersample": self.supersample,
        }


def _random_phantom(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    # body: a large ellipse that stays inside the reconstruction circle
    a, b = rng.uniform(0.55, 0.85, size=2)
    body = (rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), a, b,
            rng.uniform(0, 180), rng.uniform(0.3, 0.6))
    ellipses = [body]
    x, y = _grid(spec.size, 1)
    n = int(rng.integers(spec.ellipse_range[0], spec.ellipse_range[1] + 1))
    while len(ellipses) < n + 1:
        r = rng.uniform(0.0, 0.6)
        t = rng.uniform(0.0, 2 * math.pi)
        ea, eb = rng.uniform(0.03, 0.3, size=2)
        if r + max(ea, eb) > 0.9:
            continue
        cand = (r * math.cos(t), r * math.sin(t), ea, eb, rng.uniform(0, 180),
                rng.uniform(*spec.intensity_range))
        # reject ellipses too thin to cover any pixel center
        if not _ellipse(x, y, *cand[:5]).any() or cand[5] == 0.0:
            continue
        ellipses.append(cand)
    img = render_ellipses(spec.size, ellipses, spec.supersample)
    return stretch(np.clip(img, 0.0, None))


def generate_phantoms(spec: PhantomSpec) -> list[np.ndarray]:
    """Deterministic list of ``spec.count`` images in [0, 255] with max exactly 255."""
    spec.validate()
    if spec.kind == "shepp-logan":
        img = shepp_logan(spec.size, spec.supersample)
        return [img.copy() for _ in range(spec.count)]
    out = []
    for i in range(spec.count):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([spec.seed, i])))
        out.append(_random_phantom(spec, rng))
    return out


def load_grayscale(path: str | Path, size: int) -> np.ndarray:
    """Read any image Pillow understands, center-crop to square, resize, stretch."""
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("F")
        w, h = im.size
        side = min(w, h)
        left, top = (w - side) // 2, (h - side) // 2
        im = im.crop((left, top, left + side, top + side)).resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=float)
    return stretch(arr)
