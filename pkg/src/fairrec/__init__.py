"""Multi-interest graph recommendation with interest-diversity fairness auditing."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
