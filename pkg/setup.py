import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("RFLAB_PURE_PYTHON") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:  # fallback kernels are used at import time
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "rflab._kernels",
                    ["src/rflab/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3", "-fno-fast-math", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": 3},
        )

setup(ext_modules=ext_modules)
