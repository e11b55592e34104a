"""Build script.

The compiled kernel extension is optional: if Cython or a C compiler is
missing the package still installs and falls back to the NumPy kernels at
import time. Set RMSDA_SKIP_EXT=1 to skip the extension build explicitly.
"""
import os
import sys

from setuptools import setup

ext_modules = []
if os.environ.get("RMSDA_SKIP_EXT", "0") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "rmsda._kernels",
                    sources=["src/rmsda/_kernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError as exc:
        print(f"skipping compiled kernels ({exc}); NumPy fallback will be used",
              file=sys.stderr)

setup(ext_modules=ext_modules)
