"""Step-kernel selection: compiled extension with numpy fallback.

The compiled kernel is optional; if the extension failed to build (or
MKOLMO_KERNEL=py is set) the numpy twin is used.  Both produce the same
trajectories up to floating-point summation order.
"""

import os

KIND_CODES = {"ou_bounded": 0, "linear": 1}

_forced_py = os.environ.get("MKOLMO_KERNEL", "").strip().lower() == "py"

if not _forced_py:
    try:
        from ._stepkernel import advance_chunk
        kernel_name = "c"
    except ImportError:
        from ._kernel_py import advance_chunk
        kernel_name = "py"
else:
    from ._kernel_py import advance_chunk
    kernel_name = "py"

__all__ = ["advance_chunk", "kernel_name", "KIND_CODES"]
