"""atlasforge: learned deformable templates for 2D image collections.

Jointly estimates a template image (optionally conditioned on attribute
vectors) and a network that registers every image in a collection to it,
using stationary-velocity-field diffeomorphisms.
"""

import os as _os

# Cap BLAS worker threads before numpy loads its backend. ATLASFORGE_THREADS
# bounds every thread pool this process spawns.
_threads = _os.environ.get("ATLASFORGE_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
