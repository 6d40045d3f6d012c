"""Budgeted convnet training: distillation, dataset forging, and cost modeling.

The package splits into a small autodiff substrate (`tensor`), architecture
descriptions and builders (`models`, `costmodel`), data plumbing (`ppm`,
`augment`, `domainforge`, `fixtures`), the training procedures (`trainkit`),
and a CLI (`cli`). Everything is seeded through `rng.stream`, so identical
configs reproduce identical bytes.
"""

__version__ = "0.1.0"

from .errors import CedgError, ConfigError, DataError, NumericError, ShapeError
from .rng import stream
from .tensor import PRESETS, Parameter, SgdConfig, Tensor, no_grad, sgd_step, zero_grads

__all__ = [
    "__version__",
    "CedgError", "ConfigError", "DataError", "NumericError", "ShapeError",
    "stream",
    "PRESETS", "Parameter", "SgdConfig", "Tensor", "no_grad", "sgd_step", "zero_grads",
]
