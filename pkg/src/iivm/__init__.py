"""Incremental import vector machines with DRF-guided self-training."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, IivmError, NumericalError  # noqa: F401
from .ivm import IvmModel, predict, train  # noqa: F401
from .kernel import KernelParams  # noqa: F401
