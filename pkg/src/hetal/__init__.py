"""Active learning on heteroskedastic label-noise distributions, at desk scale."""

from hetal.errors import (
    ConfigurationError,
    DimensionError,
    HetalError,
    InputError,
    NumericError,
    PreconditionError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DimensionError",
    "HetalError",
    "InputError",
    "NumericError",
    "PreconditionError",
]
