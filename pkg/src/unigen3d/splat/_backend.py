"""Pick the compositing core at import time.

The compiled extension is used when it imports; ``UNIGEN3D_RASTER=python``
forces the numpy fallback (handy for benchmarking and for machines without
a compiler).
"""
import os

from . import _raster_py

python_kernel = _raster_py
compiled_kernel = None

try:
    from . import _raster_ext as compiled_kernel
except ImportError:  # extension not built
    compiled_kernel = None

if os.environ.get("UNIGEN3D_RASTER", "").lower() == "python" or compiled_kernel is None:
    kernel = python_kernel
    BACKEND = "python"
else:
    kernel = compiled_kernel
    BACKEND = "compiled"
