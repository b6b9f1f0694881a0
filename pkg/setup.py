import os

import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

# -ffp-contract=off keeps mul/add rounding identical to plain Python/numpy
# arithmetic, which the exact-equivalence tests rely on.  Do not add
# -ffast-math for the same reason.
compile_args = ["-O3", "-ffp-contract=off"]
if os.environ.get("COMBNET_PORTABLE") != "1":
    compile_args.append("-march=native")

extensions = [
    Extension(
        "combnet._ckernels",
        ["src/combnet/_ckernels.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=compile_args,
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3", "boundscheck": False, "wraparound": False},
    )
)
