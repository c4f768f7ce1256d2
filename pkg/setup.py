import os
import warnings

from setuptools import setup

try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("INCDET_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "incdet._kernels._ckernels",
                ["src/incdet/_kernels/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3", "-Wno-unused-function", "-Wno-cpp"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
else:
    warnings.warn("Cython unavailable or disabled; the pure-Python kernels will be used.")

setup(ext_modules=ext_modules)
