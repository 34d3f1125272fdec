"""Build the optional compiled kernel core.

The package works without it; ``reeflora.kernels`` falls back to the numpy
implementation when the extension is missing.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("REEF_LORA_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "reeflora._ckernels",
                    ["src/reeflora/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    # no fast-math / FMA contraction: results must be reproducible
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
