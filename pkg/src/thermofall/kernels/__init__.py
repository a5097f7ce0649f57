"""Hot numerical kernels with a compiled core and a numpy fallback.

The compiled extension (_fastcore, Cython) accelerates the im2col/col2im
and pooling scatter loops that dominate convolution cost. Selection happens
once at import: the compiled core is preferred when present, and the
THERMOFALL_BACKEND environment variable ("cython" or "numpy") forces a
choice. Both backends implement the same API and produce results equal to
within float rounding; tests assert equivalence.
"""
import os

from . import reference

BACKEND = "numpy"
_forced = os.environ.get("THERMOFALL_BACKEND", "").strip().lower()

if _forced not in ("", "numpy"):
    if _forced != "cython":
        raise ValueError(f"THERMOFALL_BACKEND must be 'numpy' or 'cython', got {_forced!r}")

_impl = reference
if _forced != "numpy":
    try:
        from . import compiled as _compiled

        _impl = _compiled
        BACKEND = "cython"
    except ImportError:
        if _forced == "cython":
            raise ImportError(
                "THERMOFALL_BACKEND=cython but the compiled core is not built; "
                "reinstall the package with Cython and a C compiler available"
            )

conv3d_forward = _impl.conv3d_forward
conv3d_grad_input = _impl.conv3d_grad_input
conv3d_grad_kernel = _impl.conv3d_grad_kernel
maxpool3d_forward = _impl.maxpool3d_forward
maxpool3d_backward = _impl.maxpool3d_backward
