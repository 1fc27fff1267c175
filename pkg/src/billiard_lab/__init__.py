"""Dispersing billiards on the 2-torus: exact map, corridors, singularities, statistics."""

import warnings as _warnings

# numba probes TBB before falling back to its own thread pool; the notice is noise
_warnings.filterwarnings("ignore", message=".*TBB threading layer.*")

__version__ = "0.1.0"
