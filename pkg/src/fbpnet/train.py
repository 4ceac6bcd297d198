"""Adam training of the dual-domain network with best-validation checkpointing."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .metrics import psnr
from .network import DualDomainNet, NetworkConfig, check_lambda
from .nn.io import atomic_write_text
from .nn.optim import Adam

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "val_psnr_image", "val_psnr_sino", "wall_seconds")


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; ``net`` holds the last finite best-validation state."""

    def __init__(self, message: str, net: DualDomainNet, history: list[dict]):
        super().__init__(message)
        self.net = net
        self.history = history


@dataclass
class Samples:
    """Aligned stacks: inputs ``x`` and labels ``y`` as ``(n, M, N)``, images ``u`` as ``(n, M, M)``."""

    x: np.ndarray
    y: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        n = self.x.shape[0]
        if n == 0:
            raise ValueError("dataset is empty")
        if self.y.shape != self.x.shape:
            raise ValueError(f"input shape {self.x.shape} and label shape {self.y.shape} differ")
        if self.u.shape != (n, self.x.shape[1], self.x.shape[1]):
            raise ValueError(f"image labels {self.u.shape} do not match sinograms {self.x.shape}")

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> "Samples":
        return Samples(self.x[idx], self.y[idx], self.u[idx])


@dataclass
class TrainConfig:
    lam: float = 0.1
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 4
    width1: int = 16
    width2: int = 24
    seed: int = 0
    val_fraction: float = 0.1
    pad_factor: int = 2
    deterministic: bool = False

    def validate(self) -> None:
        check_lambda(self.lam)
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("need epochs >= 1 and batch_size >= 2 (batch norm)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class TrainResult:
    net: DualDomainNet
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream])))


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = _rng(seed, 1).permutation(n)
    n_val = int(round(val_fraction * n)) if n > 1 else 0
    if val_fraction > 0 and n > 1:
        n_val = max(1, n_val)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def evaluate(net: DualDomainNet, data: Samples, batch_size: int = 8) -> dict:
    """Mean image PSNR (circle mask) and sinogram PSNR (stretched, full frame)."""
    s1, ct = net.predict(data.x, batch_size)
    c = net.sino_stretch
    img = [psnr(ct[i], data.u[i]) for i in range(len(data))]
    sino = [psnr(s1[i] * c, data.y[i] * c, masked=False) for i in range(len(data))]
    return {"psnr_image": float(np.mean(img)), "psnr_sino": float(np.mean(sino)), "s1": s1, "ct": ct}


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for row in history:
        w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_COLUMNS[1:]])
    return buf.getvalue()


def train(data: Samples, config: TrainConfig, run_dir: str | Path | None = None,
          sino_scale: float | None = None) -> TrainResult:
    """Optimise the dual-domain loss with Adam.

    A ``val_fraction`` share of ``data`` (chosen by ``seed``) is held out; the
    parameters with the best validation image PSNR are kept, returned and, with
    ``run_dir``, written to ``run_dir/best.fbpn`` alongside ``history.csv``.
    """
    config.validate()
    train_idx, val_idx = split_indices(len(data), config.val_fraction, config.seed)
    train_set = data.subset(train_idx)
    val_set = data.subset(val_idx) if len(val_idx) else train_set
    if len(train_set) < 2:
        raise ValueError("need at least 2 training samples")

    m, n_ang = data.x.shape[1], data.x.shape[2]
    if sino_scale is None:
        sino_scale = float(train_set.y.max())
    net = DualDomainNet(NetworkConfig(
        image_size=m, num_angles=n_ang, width1=config.width1, width2=config.width2,
        pad_factor=config.pad_factor, sino_scale=sino_scale, seed=config.seed,
    ))
    opt = Adam(net.parameters(), lr=config.lr)
    order_rng = _rng(config.seed, 2)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    hyper = {"train": asdict(config)}

    history: list[dict] = []
    best_state, best_psnr, best_epoch = net.state_dict(), -math.inf, 0
    t0 = time.perf_counter()
    bs = config.batch_size
    for epoch in range(1, config.epochs + 1):
        perm = order_rng.permutation(len(train_set))
        batches = [perm[i:i + bs] for i in range(0, len(perm), bs)]
        if len(batches) > 1 and len(batches[-1]) < 2:
            batches[-2] = np.concatenate(batches[-2:])
            batches.pop()
        total, count = 0.0, 0
        for idx in batches:
            batch = train_set.subset(np.sort(idx))
            opt.zero_grad()
            value = net.loss_and_grad(batch.x, batch.y, batch.u, config.lam)
            if not math.isfinite(value):
                net.load_state_dict(best_state)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", net, history)
            opt.step()
            total += value * len(idx)
            count += len(idx)

        ev = evaluate(net, val_set)
        wall = 0.0 if config.deterministic else time.perf_counter() - t0
        row = {"epoch": epoch, "train_loss": total / count, "val_psnr_image": ev["psnr_image"],
               "val_psnr_sino": ev["psnr_sino"], "wall_seconds": wall}
        history.append(row)
        log.info("epoch %d loss %.4g val psnr image %.2f sino %.2f",
                 epoch, row["train_loss"], row["val_psnr_image"], row["val_psnr_sino"])
        if ev["psnr_image"] > best_psnr:
            best_psnr, best_epoch = ev["psnr_image"], epoch
            best_state = net.state_dict()
            if run_dir is not None:
                net.save(run_dir / "best.fbpn", best_epoch=epoch, **hyper)
        if run_dir is not None:
            atomic_write_text(run_dir / "history.csv", history_csv(history))

    net.load_state_dict(best_state)
    return TrainResult(net=net, history=history, best_epoch=best_epoch)
