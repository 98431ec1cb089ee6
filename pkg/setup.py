import numpy as np
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """Build the speedup extension if possible, fall back to pure numpy if not."""

    def run(self):
        try:
            super().run()
        except Exception as exc:
            print(f"warning: compiled core skipped ({exc}); numpy backend will be used")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: building {ext.name} failed ({exc}); numpy backend will be used")


extensions = [
    Extension(
        "adhesim._core.speedups",
        ["src/adhesim/_core/speedups.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(extensions, compiler_directives={"language_level": "3"})
except Exception as exc:
    print(f"warning: cythonize unavailable ({exc}); numpy backend will be used")
    ext_modules = []

setup(
    ext_modules=ext_modules,
    cmdclass={"build_ext": optional_build_ext},
)
