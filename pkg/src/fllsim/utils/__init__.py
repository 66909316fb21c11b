from .logger import log_to_file, setup_logger
from .rng import SeedStreams, derive_seed

__all__ = [
    "setup_logger",
    "log_to_file",
    "SeedStreams",
    "derive_seed",
]
