import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "volprob.kernels._native",
        ["src/volprob/kernels/_native.pyx", "src/volprob/kernels/_conv3d_impl.c"],
        include_dirs=[numpy.get_include(), "src/volprob/kernels"],
        # -fno-wrapv undoes the interpreter default -fwrapv, which defeats
        # trip-count analysis and with it vectorization of the hot loops
        extra_compile_args=["-O3", "-march=native", "-fno-math-errno", "-fno-wrapv"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
