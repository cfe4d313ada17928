"""Build script.

The compiled step kernel is optional: if Cython or a C compiler is not
available the package installs anyway and falls back to the numpy kernel
at import time (see mkolmo.kernels).
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "mkolmo._stepkernel",
                ["src/mkolmo/_stepkernel.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )
except Exception as exc:  # pragma: no cover - build-environment dependent
    sys.stderr.write(f"mkolmo: skipping compiled kernel ({exc!r}); "
                     "the numpy fallback will be used\n")
    ext_modules = []

setup(ext_modules=ext_modules)
