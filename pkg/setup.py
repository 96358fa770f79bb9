from setuptools import Extension, setup
from Cython.Build import cythonize

setup(
    ext_modules=cythonize(
        [Extension("chaos_sim._speedups", ["src/chaos_sim/_speedups.pyx"])],
        language_level=3,
    )
)
