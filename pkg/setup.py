"""Build script for the compiled geometry kernels.

The extension is optional: if it fails to build (or was never built), the
package falls back to the numpy reference kernels at import time.
"""

import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "upl.kernels._core",
        ["src/upl/kernels/_core.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
