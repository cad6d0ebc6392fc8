"""Build the muddformer._core extension straight from the C++ sources.

The same flags as the CMake build, minus -march tuning surprises: value
semantics stay IEEE (no -ffast-math), matching the determinism guarantees.
"""

from pathlib import Path

from pybind11.setup_helpers import Pybind11Extension, build_ext
from setuptools import setup

ROOT = Path(__file__).resolve().parent
SOURCES = sorted(
    str(p.relative_to(ROOT)) for p in (ROOT / "src").glob("*.cpp")
) + ["bindings/py_module.cpp"]

ext = Pybind11Extension(
    "muddformer._core",
    SOURCES,
    include_dirs=["include", "vendor"],
    cxx_std=20,
    extra_compile_args=["-O3", "-march=native", "-fno-math-errno"],
)

setup(ext_modules=[ext], cmdclass={"build_ext": build_ext})
