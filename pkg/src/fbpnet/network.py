"""The sinogram network, the FBP layer and the image network, end to end.

Units.  Public methods take and return physical units: sinograms as line
integrals, images on the stretched [0, 255] scale.  Internally the sinogram
block sees ``x / sino_scale`` (``sino_scale`` is the largest training label
value) and the image block sees ``v / 255``; both blocks rescale their outputs
back.  The sinogram loss term is evaluated on sinograms stretched by
``255 / sino_scale`` so that both loss terms live on the same [0, 255] scale.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .fbp import FbpLayer, fbp_forward, fbp_vjp, make_fbp_layer
from .geometry import Geometry, make_geometry
from .nn import functional as F
from .nn.io import atomic_write_text, load_arrays, save_arrays
from .nn.layers import BatchNorm, Conv2d, Deconv2d, Parameter, ReLU

IMAGE_PEAK = 255.0


class Sigma1:
    """Residual denoiser: conv+ReLU, 4 x (conv+BN+ReLU), conv, plus input shortcut."""

    def __init__(self, width: int, rng: np.random.Generator, depth: int = 6, kernel: int = 3,
                 tail_scale: float = 1.0):
        if depth < 3:
            raise ValueError("sinogram block needs at least 3 layers")
        self.width = width
        self.layers = [Conv2d(1, width, kernel, rng), ReLU()]
        for _ in range(depth - 2):
            self.layers += [Conv2d(width, width, kernel, rng), BatchNorm(width), ReLU()]
        self.layers.append(Conv2d(width, 1, kernel, rng))
        self.layers[-1].weight.value *= tail_scale

    def named_layers(self):
        conv_i = 0
        for layer in self.layers:
            if isinstance(layer, Conv2d):
                conv_i += 1
                yield f"conv{conv_i}", layer
            elif isinstance(layer, BatchNorm):
                yield f"bn{conv_i}", layer

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        h = x
        for layer in self.layers:
            h = layer.forward(h, train)
        return x + h

    def backward(self, dout: np.ndarray) -> np.ndarray:
        g = dout
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return dout + g


class Sigma2:
    """Encoder/decoder with three additive shortcuts.

    Encoder: conv8..conv12 each followed by ReLU.  Decoder: deconv13..deconv17,
    each followed by ReLU (the last one is stage 18).  Shortcuts are added
    before the activation: enc11 at deconv13, enc9 at deconv15, the block input
    at deconv17.
    """

    def __init__(self, width: int, rng: np.random.Generator, kernel: int = 5, tail_scale: float = 1.0):
        self.width = width
        c = width
        self.enc = [Conv2d(1, c, kernel, rng)] + [Conv2d(c, c, kernel, rng) for _ in range(4)]
        self.dec = [Deconv2d(c, c, kernel, rng) for _ in range(4)] + [Deconv2d(c, 1, kernel, rng)]
        self.dec[-1].weight.value *= tail_scale
        self._pre = None

    def named_layers(self):
        for i, layer in enumerate(self.enc):
            yield f"conv{8 + i}", layer
        for i, layer in enumerate(self.dec):
            yield f"deconv{13 + i}", layer

    def forward(self, v: np.ndarray, train: bool = False) -> np.ndarray:
        pre = []
        h = v
        enc_out = []
        for conv in self.enc:
            z = conv.forward(h, train)
            pre.append(z)
            h = F.relu_forward(z)
            enc_out.append(h)
        skips = {0: enc_out[3], 2: enc_out[1], 4: v}
        for i, deconv in enumerate(self.dec):
            z = deconv.forward(h, train)
            if i in skips:
                z = z + skips[i]
            pre.append(z)
            h = F.relu_forward(z)
        self._pre = pre
        return h

    def backward(self, dout: np.ndarray) -> np.ndarray:
        pre = self._pre
        d_skip = {}  # gradient flowing into encoder outputs through shortcuts
        d_input = 0.0
        g = dout
        for i in reversed(range(5)):
            dz = F.relu_backward(pre[5 + i], g)
            if i == 4:
                d_input = dz
            elif i == 2:
                d_skip[1] = dz
            elif i == 0:
                d_skip[3] = dz
            g = self.dec[i].backward(dz)
        for i in reversed(range(5)):
            if i in d_skip:
                g = g + d_skip[i]
            dz = F.relu_backward(pre[i], g)
            g = self.enc[i].backward(dz)
        return g + d_input


@dataclass
class NetworkConfig:
    image_size: int = 64
    num_angles: int = 180
    width1: int = 16
    width2: int = 24
    pad_factor: int = 2
    sino_scale: float = 1.0
    seed: int = 0
    # shrinks the He-normal init of each block's last layer so both blocks start near identity
    tail_init_scale: float = 1e-2


class DualDomainNet:
    def __init__(self, config: NetworkConfig, geometry: Geometry | None = None):
        self.config = config
        if geometry is None:
            geometry = make_geometry(config.image_size, config.num_angles)
        if geometry.sinogram_shape != (config.image_size, config.num_angles):
            raise ValueError("geometry does not match the network configuration")
        self.geometry = geometry
        self.fbp: FbpLayer = make_fbp_layer(geometry, config.pad_factor)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([config.seed, 0])))
        self.sigma1 = Sigma1(config.width1, rng, tail_scale=config.tail_init_scale)
        self.sigma2 = Sigma2(config.width2, rng, tail_scale=config.tail_init_scale)
        # test hook: when False the image-loss gradient does not reach sigma1
        self.vjp_enabled = True

    @property
    def sino_scale(self) -> float:
        return self.config.sino_scale

    @property
    def sino_stretch(self) -> float:
        """Factor mapping line integrals onto the [0, 255] loss scale."""
        return IMAGE_PEAK / self.sino_scale

    # parameters ------------------------------------------------------------
    def _layers(self):
        for prefix, block in (("sigma1", self.sigma1), ("sigma2", self.sigma2)):
            for name, layer in block.named_layers():
                yield f"{prefix}.{name}", layer

    def parameters(self, block: str | None = None) -> "OrderedDict[str, Parameter]":
        out = OrderedDict()
        for lname, layer in self._layers():
            if block is not None and not lname.startswith(block + "."):
                continue
            for pname, p in layer.parameters().items():
                out[f"{lname}.{pname}"] = p
        return out

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((k, p.value.copy()) for k, p in self.parameters().items())
        for lname, layer in self._layers():
            if isinstance(layer, BatchNorm):
                for bname, buf in layer.buffers().items():
                    out[f"{lname}.{bname}"] = buf.copy()
        return out

    def load_state_dict(self, state) -> None:
        params = self.parameters()
        bufs = {}
        for lname, layer in self._layers():
            if isinstance(layer, BatchNorm):
                for bname, buf in layer.buffers().items():
                    bufs[f"{lname}.{bname}"] = buf
        expected = set(params) | set(bufs)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ValueError(f"state mismatch; missing={missing[:3]} unexpected={extra[:3]}")
        for k, p in params.items():
            if state[k].shape != p.value.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.value.shape}")
            p.value[...] = state[k]
        for k, b in bufs.items():
            b[...] = state[k]

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    # forward ---------------------------------------------------------------
    def _check_sino(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 3 or x.shape[1:] != self.geometry.sinogram_shape:
            raise ValueError(f"sinogram batch shape {x.shape} != (B, {self.geometry.sinogram_shape})")
        return x

    def sigma1_forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """``(B, M, N)`` sinograms -> processed sinograms, same units and shape."""
        x = self._check_sino(x)
        out = self.sigma1.forward((x / self.sino_scale)[..., None], train)
        return out[..., 0] * self.sino_scale

    def sigma2_forward(self, v: np.ndarray, train: bool = False) -> np.ndarray:
        """``(B, M, M)`` images -> refined images."""
        v = np.asarray(v, dtype=float)
        if v.ndim != 3 or v.shape[1:] != self.geometry.image_shape:
            raise ValueError(f"image batch shape {v.shape} != (B, {self.geometry.image_shape})")
        out = self.sigma2.forward((v / IMAGE_PEAK)[..., None], train)
        return out[..., 0] * IMAGE_PEAK

    def forward_full(self, x: np.ndarray, train: bool = False) -> tuple[np.ndarray, np.ndarray]:
        s1 = self.sigma1_forward(x, train)
        ct = self.sigma2_forward(fbp_forward(self.fbp, s1), train)
        return s1, ct

    # loss ------------------------------------------------------------------
    def loss(self, x, y, u, lam: float, train: bool = False) -> float:
        check_lambda(lam)
        s1, ct = self.forward_full(x, train)
        return self._loss_terms(s1, ct, y, u, lam)

    def _loss_terms(self, s1, ct, y, u, lam) -> float:
        c = self.sino_stretch
        return lam * F.mse(s1 * c, np.asarray(y) * c) + (1.0 - lam) * F.mse(ct, np.asarray(u))

    def loss_and_grad(self, x, y, u, lam: float, train: bool = True) -> float:
        """Forward, loss and backward; gradients accumulate into ``Parameter.grad``."""
        check_lambda(lam)
        y = np.asarray(y, dtype=float)
        u = np.asarray(u, dtype=float)
        s1, ct = self.forward_full(x, train)
        if y.shape != s1.shape or u.shape != ct.shape:
            raise ValueError("label shapes do not match the network outputs")
        value = self._loss_terms(s1, ct, y, u, lam)

        d_ct = (1.0 - lam) * F.mse_grad(ct, u)
        d_v = self.sigma2.backward((d_ct * IMAGE_PEAK)[..., None])[..., 0] / IMAGE_PEAK
        c = self.sino_stretch
        d_s1 = lam * c * F.mse_grad(s1 * c, y * c)
        if self.vjp_enabled:
            d_s1 = d_s1 + fbp_vjp(self.fbp, d_v)
        self.sigma1.backward((d_s1 * self.sino_scale)[..., None])
        return value

    def predict(self, x: np.ndarray, batch_size: int = 8) -> tuple[np.ndarray, np.ndarray]:
        x = self._check_sino(x)
        s1_parts, ct_parts = [], []
        for start in range(0, x.shape[0], batch_size):
            s1, ct = self.forward_full(x[start:start + batch_size], train=False)
            s1_parts.append(s1)
            ct_parts.append(ct)
        return np.concatenate(s1_parts), np.concatenate(ct_parts)

    # persistence -----------------------------------------------------------
    def save(self, path: str | Path, **hyper) -> None:
        """Write the parameter file and its JSON sidecar (``<path>.json``)."""
        path = Path(path)
        save_arrays(path, self.state_dict())
        meta = {"network": asdict(self.config), "angles": list(self.geometry.angles), **hyper}
        atomic_write_text(sidecar_path(path), json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DualDomainNet":
        path = Path(path)
        meta = json.loads(sidecar_path(path).read_text())
        config = NetworkConfig(**meta["network"])
        geom = Geometry(config.image_size, tuple(meta["angles"]))
        net = cls(config, geom)
        net.load_state_dict(load_arrays(path))
        return net


def sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def check_lambda(lam: float) -> None:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
