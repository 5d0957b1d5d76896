import numpy as np
from setuptools import setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        "src/trafficbench/kernels/_fast.pyx",
        compiler_directives={"language_level": "3"},
    )
except ImportError:  # pure-Python fallback still works without Cython
    ext_modules = []

setup(
    ext_modules=ext_modules,
    include_dirs=[np.get_include()],
)
