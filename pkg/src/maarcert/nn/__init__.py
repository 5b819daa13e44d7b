"""Minimal deterministic network engine with reverse-mode gradients."""
from .network import (
    Conv,
    Dense,
    LayeredNetwork,
    ReLU,
    cross_entropy,
    forward,
    grad_params,
    grad_wrt_activation,
    init_network,
    predict,
    softmax,
)
from .optim import Adam, SGDMomentum, StepSchedule, make_optimizer, optimizer_step

__all__ = [
    "Adam",
    "Conv",
    "Dense",
    "LayeredNetwork",
    "ReLU",
    "SGDMomentum",
    "StepSchedule",
    "cross_entropy",
    "forward",
    "grad_params",
    "grad_wrt_activation",
    "init_network",
    "make_optimizer",
    "optimizer_step",
    "predict",
    "softmax",
]
