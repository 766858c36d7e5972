"""CT slice selection by lung area and an embedding-aggregation classifier."""
from ._accel import BACKEND, USE_NUMBA

__version__ = "0.1.0"
__all__ = ["BACKEND", "USE_NUMBA", "__version__"]
