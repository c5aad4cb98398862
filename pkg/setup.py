import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python fallback only
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("BPDL_NO_EXT"):
    random_lib = os.path.join(os.path.dirname(np.__file__), "random", "lib")
    ext = Extension(
        "bpdl.engine._core",
        ["src/bpdl/engine/_core.pyx"],
        include_dirs=[np.get_include()],
        library_dirs=[random_lib],
        libraries=["npyrandom"],
        extra_compile_args=["-O2", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    ext_modules = cythonize([ext], language_level=3)

setup(ext_modules=ext_modules)
