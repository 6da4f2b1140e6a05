"""Build script for the optional compiled decode kernel.

The package is pure Python plus one Cython extension for the hot
cached-attention kernel. If Cython or a C compiler is unavailable the
extension is skipped and the numpy fallback is used at runtime.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    from Cython.Build import cythonize
    import numpy as np

    ext = Extension(
        "kvlab._decode_cy",
        ["src/kvlab/_decode_cy.pyx"],
        include_dirs=[np.get_include()],
        # keep FP semantics identical to the plain-C expression order
        extra_compile_args=["-O2", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    ext_modules = cythonize(
        [ext],
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "language_level": "3",
        },
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
