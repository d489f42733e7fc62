"""Backend selection for the trajectory stepping kernels.

The compiled extension is preferred when importable; setting the
environment variable ``HCTLAB_PURE_PYTHON=1`` forces the numpy fallback
(useful for benchmarking and for debugging kernel-level differences).
"""

import os

if os.environ.get("HCTLAB_PURE_PYTHON", "") == "1":
    from . import _stepkern_py as _impl
else:
    try:
        from . import _stepkern as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _stepkern_py as _impl

BACKEND: str = _impl.BACKEND

verlet1d = _impl.verlet1d
verlet2d = _impl.verlet2d
guided1d_step = _impl.guided1d_step
guided2d_step = _impl.guided2d_step
