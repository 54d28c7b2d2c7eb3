from setuptools import Extension, setup
from Cython.Build import cythonize
import numpy as np

ext_module = Extension(
    "ringflow._ring_kernel",
    ["src/ringflow/_ring_kernel.pyx"],
    include_dirs=[np.get_include()],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
)

setup(
    ext_modules=cythonize(ext_module, language_level=3),
)
