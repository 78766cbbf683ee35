"""Layer-wise expert allocation for continual language expansion.

Profile per-layer cross-language hidden-state similarity, allocate new MoE
experts per layer in inverse proportion to it, upcycle a dense toy
transformer, run the two-stage training protocol (new-expert pretraining,
then router review with prior routing and a routing classifier), and serve
classifier-gated inference.
"""

__version__ = "0.1.0"

import os as _os

# LAYERMOE_THREADS caps internal parallelism; it must land in the BLAS
# environment before numpy first loads, i.e. before the imports below.
_threads = _os.environ.get("LAYERMOE_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from . import allocator, corpus, errors, model, numerics, profiler, trainer

__all__ = [
    "__version__",
    "allocator",
    "corpus",
    "errors",
    "model",
    "numerics",
    "profiler",
    "trainer",
]
