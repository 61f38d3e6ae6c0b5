"""Minimal CNN engine: valid convolutions, max pooling, PReLU, dense layers, SGD."""
from .functional import avgpool2, conv2d, max_pool, prelu, softmax2
from .network import (
    Conv, Dense, Flatten, MaxPool, Network, NetworkSpec, PReLU, SPEC_BUILDERS,
    backward, forward, init_params, net12_spec, net24_spec, net48_spec, param_shapes, sgd_step,
)

__all__ = [
    "Conv", "Dense", "Flatten", "MaxPool", "Network", "NetworkSpec", "PReLU", "SPEC_BUILDERS",
    "avgpool2", "backward", "conv2d", "forward", "init_params", "max_pool", "net12_spec",
    "net24_spec", "net48_spec", "param_shapes", "prelu", "sgd_step", "softmax2",
]
