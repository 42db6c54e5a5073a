"""Red-packet allocation, simulated group worlds and stratified effect estimation."""
from .errors import (BootstrapInstabilityError, ConvergenceError, HongbaoError, InvalidConfigError,
                     InvalidSpecError, UnidentifiedError)
from .splitter import PacketSpec, sample_allocations, split_random

__version__ = "0.1.0"

__all__ = ["BootstrapInstabilityError", "ConvergenceError", "HongbaoError", "InvalidConfigError",
           "InvalidSpecError", "PacketSpec", "UnidentifiedError", "sample_allocations", "split_random"]
