"""PSNR / SSIM restricted to the inscribed circle, plus report aggregation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import circle_mask

PEAK = 255.0


def _region(shape: tuple[int, ...], masked: bool) -> np.ndarray | None:
    if not masked:
        return None
    if shape[0] != shape[1]:
        raise ValueError(f"circle mask needs a square image, got {shape}")
    return circle_mask(shape[0])


def psnr(a: np.ndarray, b: np.ndarray, peak: float = PEAK, masked: bool = True) -> float:
    """``10 log10(peak^2 / mse)`` over the circle mask; ``inf`` for identical inputs."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    d = a - b
    mask = _region(a.shape, masked)
    if mask is not None:
        d = d[mask]
    err = float(np.mean(d * d))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a: np.ndarray, b: np.ndarray, peak: float = PEAK, window: np.ndarray | None = None) -> np.ndarray:
    """Local SSIM at every pixel, Gaussian-weighted moments with symmetric boundary."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if window is None:
        window = gaussian_window()
    if a.shape[0] < window.shape[0] or a.shape[1] < window.shape[1]:
        raise ValueError(f"image {a.shape} is smaller than the {window.shape} SSIM window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2

    def filt(img):
        return ndimage.correlate(img, window, mode="reflect")

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a * mu_a
    sbb = filt(b * b) - mu_b * mu_b
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray, peak: float = PEAK, masked: bool = True) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03)."""
    smap = ssim_map(a, b, peak)
    mask = _region(smap.shape, masked)
    if mask is not None:
        smap = smap[mask]
    return float(np.mean(smap))


@dataclass
class MetricReport:
    """Per-image PSNR/SSIM rows with aggregate statistics."""

    names: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    def add(self, name: str, pred: np.ndarray, ref: np.ndarray, peak: float = PEAK, masked: bool = True):
        self.names.append(name)
        self.psnr.append(psnr(pred, ref, peak, masked))
        self.ssim.append(ssim(pred, ref, peak, masked))

    def summary(self) -> dict:
        p = np.asarray(self.psnr, dtype=float)
        s = np.asarray(self.ssim, dtype=float)
        # identical images give inf PSNR; their spread is undefined, not an error
        with np.errstate(invalid="ignore"):
            return {
                "count": len(self.names),
                "psnr_mean": float(np.mean(p)) if len(p) else math.nan,
                "psnr_std": float(np.std(p)) if len(p) else math.nan,
                "ssim_mean": float(np.mean(s)) if len(s) else math.nan,
                "ssim_std": float(np.std(s)) if len(s) else math.nan,
            }

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "psnr", "ssim"])
            for row in zip(self.names, self.psnr, self.ssim):
                w.writerow(row)

    def write_json(self, path: str | Path, **extra) -> None:
        Path(path).write_text(json.dumps({**extra, **self.summary()}, indent=2) + "\n")
