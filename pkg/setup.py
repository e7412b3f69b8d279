"""Build script for the optional compiled kernels.

The package works without the extension; planact.kernels falls back to a
NumPy implementation when the compiled module is missing.
"""

import numpy
from setuptools import Extension, setup

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "planact._ckern",
                sources=["src/planact/_ckern.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": 3},
    )
except Exception as exc:  # pragma: no cover - build-time fallback
    print(f"warning: building without compiled kernels ({exc})")

setup(ext_modules=ext_modules)
