"""Minimal NHWC tensor layers, losses and Adam for the reconstruction network."""
from .functional import (
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    deconv2d_backward,
    deconv2d_forward,
    mse,
    mse_grad,
    relu_backward,
    relu_forward,
)
from .io import load_arrays, save_arrays
from .layers import BatchNorm, Conv2d, Deconv2d, Parameter, ReLU
from .optim import Adam, AdamState, adam_step
