"""Builds the optional compiled MAC kernel.

The package is pure Python plus one Cython extension for the crossbar
dot-product inner loop.  When Cython or a C compiler is unavailable the
build skips the extension and the numpy fallback is selected at import.
"""

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        ["src/cimflow/_kernels.pyx"], language_level=3
    )
    for ext in ext_modules:
        ext.optional = True
except ImportError:
    pass

setup(ext_modules=ext_modules)
