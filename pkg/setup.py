import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "trilattice._kernels",
        ["src/trilattice/_kernels.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        # no FMA contraction and no sin/cos -> sincos fusion (glibc's sincos
        # can differ in the last bit): keeps results identical to the Python twin
        extra_compile_args=["-O2", "-ffp-contract=off", "-fno-builtin-sin", "-fno-builtin-cos"],
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
