"""Build hook for the optional compiled kernels.

The package works without them: ``fedci.kernels`` falls back to the numpy
implementations when ``fedci._kernels`` cannot be imported.
"""
import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("FEDCI_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:  # pragma: no cover - build without cython
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "fedci._kernels",
                    [os.path.join("src", "fedci", "_kernels.pyx")],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={
                "language_level": 3,
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
                "embedsignature": True,
            },
        )

setup(ext_modules=ext_modules)
