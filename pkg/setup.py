import os

from setuptools import setup

ext_modules = []
if not os.environ.get("COGPLANT_NO_EXT"):
    try:
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        # no Cython: the pure-Python kernels are used at import
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "cogplant._core",
                    ["src/cogplant/_core.pyx"],
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
