"""Build script for the optional compiled extension.

The package is fully functional without the extension: sgpmc.linalg falls
back to a pure-numpy implementation of the reverse-mode Cholesky kernel
when the compiled module is absent.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "sgpmc._cholrev",
                ["src/sgpmc/_cholrev.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
