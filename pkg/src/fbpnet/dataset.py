"""(x, y, u) dataset packaging for the 180-angle and 90-to-180 protocols."""
from __future__ import annotations

import datetime as _dt
import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .degrade import NoiseParams, degrade, interpolate_angles, subsample_angles
from .geometry import Sinogram, make_geometry, radon_forward
from .nn.io import atomic_write_text, load_arrays, save_arrays
from .train import Samples

FORMAT_VERSION = 1
MANIFEST = "dataset.json"
PROTOCOLS = ("direct-180", "sub-90-interp-180")
SPLIT_IDS = {"train": 0, "test": 1}


def make_pair(u: np.ndarray, protocol: str, noise: NoiseParams, stream: tuple[int, ...] = (),
              num_angles: int = 180, stride: int = 2, poisson: str = "sample") -> tuple[np.ndarray, np.ndarray]:
    """Clean label sinogram ``y`` and degraded input ``x`` for one image."""
    geom = make_geometry(u.shape[0], num_angles)
    y = radon_forward(u, geom)
    rng = noise.rng(*stream)
    if protocol == "direct-180":
        x = degrade(y, noise, poisson=poisson, rng=rng)
    elif protocol == "sub-90-interp-180":
        # noise first, then interpolate back to the full angle grid
        sparse = degrade(subsample_angles(y, stride), noise, poisson=poisson, rng=rng)
        x = interpolate_angles(sparse, num_angles)
    else:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    return x.data, y.data


def build_dataset(phantoms: Mapping[str, Sequence[np.ndarray]], protocol: str, noise: NoiseParams,
                  out_dir: str | Path, num_angles: int = 180, stride: int = 2,
                  poisson: str = "sample", extra: dict | None = None) -> dict:
    """Write one array file per sample and, last, the manifest; returns the manifest.

    Every image is validated before anything is written, so a shape problem
    leaves no files behind.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    if protocol == "sub-90-interp-180" and num_angles % stride:
        raise ValueError(f"stride {stride} does not divide {num_angles} angles")
    sizes = {img.shape for imgs in phantoms.values() for img in imgs}
    if len(sizes) != 1:
        raise ValueError(f"all images must share one square shape, got {sorted(sizes)}")
    (shape,) = sizes
    if shape[0] != shape[1]:
        raise ValueError(f"images must be square, got {shape}")
    for split in phantoms:
        if split not in SPLIT_IDS:
            raise ValueError(f"unknown split {split!r}")

    out_dir = Path(out_dir)
    files: dict[str, list[str]] = {}
    for split, images in phantoms.items():
        files[split] = []
        for i, u in enumerate(images):
            x, y = make_pair(np.asarray(u, dtype=float), protocol, noise, (SPLIT_IDS[split], i),
                             num_angles, stride, poisson)
            rel = f"{split}/{i:05d}.fbpa"
            save_arrays(out_dir / rel, {"x": x, "y": y, "u": u})
            files[split].append(rel)

    n_input = num_angles // stride if protocol == "sub-90-interp-180" else num_angles
    manifest = {
        "format_version": FORMAT_VERSION,
        "geometry": {"image_size": shape[0], "n_input": n_input, "n_input_stored": num_angles,
                     "n_label": num_angles, "stride": stride if protocol != "direct-180" else 1},
        "noise": {"b": noise.b, "var": noise.var, "seed": noise.seed, "poisson": poisson},
        "protocol": protocol,
        "sample_count": sum(len(v) for v in files.values()),
        "splits": files,
        "config": extra or {},
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    atomic_write_text(out_dir / MANIFEST, json.dumps(manifest, indent=2) + "\n")
    return manifest


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {manifest.get('format_version')}")
    return manifest


def load_split(root: str | Path, split: str) -> tuple[Samples, list[str]]:
    """Load a split as stacked arrays; also returns the sample names."""
    root = Path(root)
    manifest = read_manifest(root)
    if split not in manifest["splits"]:
        raise KeyError(f"dataset has no split {split!r}")
    geo = manifest["geometry"]
    sino_shape = (geo["image_size"], geo["n_input_stored"])
    xs, ys, us, names = [], [], [], []
    for rel in manifest["splits"][split]:
        arrays = load_arrays(root / rel)
        if arrays["x"].shape != sino_shape or arrays["u"].shape != (geo["image_size"],) * 2:
            raise ValueError(f"{rel}: array shapes do not match the manifest")
        xs.append(arrays["x"])
        ys.append(arrays["y"])
        us.append(arrays["u"])
        names.append(Path(rel).stem)
    return Samples(np.stack(xs), np.stack(ys), np.stack(us)), names


def as_sinogram(data: np.ndarray) -> Sinogram:
    return Sinogram(data, make_geometry(data.shape[0], data.shape[1]))
