import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

# No -ffast-math: the kernels rely on strict IEEE semantics for NaN masking
# and +/-inf interval bounds.
extensions = [
    Extension(
        "gridcp._kernels",
        ["src/gridcp/_kernels.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3"],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3"},
    )
)
