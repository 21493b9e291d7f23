"""Build script.

The compiled kernel extension is optional: if Cython or a C compiler is
missing, the package installs pure and cxrlm.kernels falls back to the
numpy reference implementations at import time.
"""

import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext


def _extensions():
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools.extension import Extension
    except ImportError as exc:
        sys.stderr.write(f"cxrlm: compiled kernels skipped ({exc})\n")
        return []
    ext = Extension(
        "cxrlm.kernels._fastcore",
        ["src/cxrlm/kernels/_fastcore.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], language_level=3)


class optional_build_ext(build_ext):
    """Degrade to a pure install when compilation fails."""

    def run(self):
        try:
            super().run()
        except Exception as exc:
            sys.stderr.write(f"cxrlm: compiled kernels skipped ({exc})\n")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            sys.stderr.write(f"cxrlm: building {ext.name} failed ({exc}); using the numpy fallback\n")


setup(ext_modules=_extensions(), cmdclass={"build_ext": optional_build_ext})
