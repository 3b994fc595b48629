"""Build script for the compiled convolution kernels.

The package works without the extension (a numpy fallback is selected at
import time), so a failed extension build degrades gracefully instead of
blocking installation.
"""

from setuptools import setup, Extension

import numpy as np


def _extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "anatomap.nn.kernels._conv3d",
        sources=["src/anatomap/nn/kernels/_conv3d.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-march=native", "-ffast-math", "-fopenmp"],
        extra_link_args=["-fopenmp"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=_extensions())
