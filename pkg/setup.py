"""Builds the optional Cython kernel extension.

The package works without it (numpy fallback selected at import), so a failed
compile downgrades to a warning instead of failing the install.
"""

import warnings

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None


def extensions():
    if cythonize is None:
        warnings.warn("Cython not available; installing with the numpy kernel fallback")
        return []
    ext = Extension(
        "streamnav._kernels._cyimpl",
        sources=["src/streamnav/_kernels/_cyimpl.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=extensions())
