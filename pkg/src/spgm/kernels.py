"""Hot-loop kernels, compiled when available.

The Cython extension ``spgm._ckernels`` is preferred; setting
``SPGM_PURE_PYTHON=1`` or a missing build falls back to numpy versions.
"""
import os

from spgm import _pykernels

BACKEND = "python"
_impl = _pykernels
if not os.environ.get("SPGM_PURE_PYTHON"):
    try:
        from spgm import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        pass

scatter_frames = _impl.scatter_frames
sinc_resample = _impl.sinc_resample
