"""Build script: compiles the optional trajectory-stepping extension.

The package is fully functional without the extension (a vectorized numpy
fallback is selected at import); the compiled kernels are a substantial
speedup for large ensembles. Any failure to build the extension downgrades
to a warning so that pure-Python installs still work.
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
                "hctlab._stepkern",
                ["src/hctlab/_stepkern.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - build-environment dependent
    sys.stderr.write(
        f"hctlab: skipping compiled kernels ({exc!r}); "
        "the pure-Python fallback will be used.\n"
    )

setup(ext_modules=ext_modules)
