"""Sinogram-to-CT reconstruction network joined by a differentiable FBP layer."""
from .degrade import NoiseParams, degrade, interpolate_angles, subsample_angles
from .fbp import FbpLayer, RampFilter, fbp_forward, fbp_vjp, filter_sinogram, make_fbp_layer, make_ramp_filter
from .geometry import (
    Geometry,
    Sinogram,
    SparseBackprojector,
    backproject,
    build_backprojector,
    circle_mask,
    make_geometry,
    radon_forward,
)
from .metrics import MetricReport, psnr, ssim
from .network import DualDomainNet, NetworkConfig

__version__ = "0.1.0"
