"""Kernel backend selection.

Hot numeric kernels (alpha blending, 3D convolution, matmul) exist in two
variants: numba ``@njit`` loops and pure-numpy array code. The numba variant
is the default; setting the environment variable ``CUBESPLAT_NO_NUMBA`` to a
non-empty value (or running without numba installed) selects the numpy path.

The flag is read per call so tests and benchmarks can flip backends inside
one process. The numba kernels are single-threaded by design: every float
accumulation happens in a fixed order, so results are bit-reproducible
regardless of thread count. The numpy fallback delegates matmul to BLAS,
which is reproducible for a fixed thread count but not across thread counts.
"""

import os

try:
    import numba  # noqa: F401

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

ENV_FLAG = "CUBESPLAT_NO_NUMBA"


def use_numba() -> bool:
    """True when kernels should dispatch to the numba implementations."""
    if not HAS_NUMBA:
        return False
    return not os.environ.get(ENV_FLAG)
