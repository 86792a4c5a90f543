"""Build script: compiles the optional Cython kernel module.

The package works without the extension (a numpy fallback is selected at
import time), so any failure here is downgraded to a warning instead of
aborting the install.  Set PHASEREC_PURE_PYTHON=1 to skip the build.
"""

import os
import warnings

from setuptools import setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            warnings.warn(f"skipping compiled kernels ({exc}); "
                          "phaserec will use the pure-numpy backend")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            warnings.warn(f"failed to build {ext.name} ({exc}); "
                          "phaserec will use the pure-numpy backend")


ext_modules = []
if os.environ.get("PHASEREC_PURE_PYTHON") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools.extension import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "phaserec._speedups",
                    ["src/phaserec/_speedups.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except Exception as exc:
        warnings.warn(f"Cython unavailable ({exc}); building pure-python phaserec")
        ext_modules = []

setup(ext_modules=ext_modules, cmdclass={"build_ext": optional_build_ext})
