"""EchoSR: a self-contained CPU super-resolution engine.

Subpackages: ``tensor`` (autodiff core), ``blocks`` (network), ``losses`` /
``metrics``, ``data`` (pipeline), ``trainer``, ``analysis`` (ERF tooling),
``cli``.
"""

from .blocks import ModelConfig, echosr_config, echosr_lite_config, echosr_forward, init_params, count_params
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "Tensor",
    "echosr_config",
    "echosr_lite_config",
    "echosr_forward",
    "init_params",
    "count_params",
]

__version__ = "0.1.0"
