"""Speech-driven gesture generation with a learned motion representation."""

from .kernels import backend

__version__ = "0.1.0"
__all__ = ["backend", "__version__"]
