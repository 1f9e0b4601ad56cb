"""Split learning with a random-projection cut bottleneck."""
from .errors import SplitError

__version__ = "0.1.0"

__all__ = ["SplitError", "__version__"]
