"""Kernel selection: compiled Cython kernels when importable, else pure Python.

Set ``NSHART_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
if not os.environ.get("NSHART_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
else:
    _impl = _pykernels

expand = _impl.expand
sample_indices = _impl.sample_indices
splitmix64 = _pykernels.splitmix64


def derive_seed(seed, *keys):
    """Stable 64-bit seed from a global seed and integer keys (e.g. query index)."""
    state = int(seed) & _pykernels.MASK64
    for k in keys:
        state, z = splitmix64(state ^ (int(k) & _pykernels.MASK64))
        state = z
    return state
