"""Build hook for the optional compiled kernel core.

The package is pure Python plus one Cython extension holding the hot
loops (Sinkhorn sweeps, brute-force KNN, pairwise distances).  The
extension is optional: set DIFFREG_NO_EXT=1 to skip it, and the package
falls back to the numpy implementations at import time.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("DIFFREG_NO_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "diffreg.kernels._core",
                    ["src/diffreg/kernels/_core.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # No Cython in the build environment: install pure.
        ext_modules = []

setup(ext_modules=ext_modules)
