"""Build the optional compiled kernels; the package falls back to pure Python without them."""

import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("SETKD_NO_EXT"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "setkd._core",
                ["src/setkd/_core.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
