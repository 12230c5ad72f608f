"""Build script: compiles the optional fast-math kernel extension.

The package is fully functional without the extension (a numpy fallback is
selected at import time), so compilation failures downgrade to a warning
instead of aborting the install.
"""

import warnings

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Build the extension if possible; fall back to pure Python otherwise."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            warnings.warn(f"skipping compiled kernels ({exc}); using numpy fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            warnings.warn(f"skipping {ext.name} ({exc}); using numpy fallback")


def extensions():
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "flmae._kernels._fastcore",
        ["src/flmae/_kernels/_fastcore.pyx"],
        include_dirs=[numpy.get_include()],
        # No -ffast-math: kernel results must track the numpy reference
        # closely enough for the cross-backend parity tests.
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(cmdclass={"build_ext": OptionalBuildExt}, ext_modules=extensions())
