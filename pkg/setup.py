import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # fall back to the pure numpy kernels
    ext_modules = []
else:
    ext_modules = cythonize(
        [Extension("flexattn._kernels", ["src/flexattn/_kernels.pyx"],
                   include_dirs=[np.get_include(), "src/flexattn"],
                   extra_compile_args=["-O3", "-fopenmp-simd", "-fno-math-errno"])],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
