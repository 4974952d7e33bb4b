"""Build script: compiles the optional Cython indexing kernel.

The package works without the extension (a pure-Python fallback is
selected at import time), so any build failure here is non-fatal.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "cvdispatch._ckernels",
                ["src/cvdispatch/_ckernels.pyx"],
            )
        ],
        language_level=3,
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
