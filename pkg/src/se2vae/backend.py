"""Kernel backend selection.

The convolution lowering (im2col/col2im) and max pooling are the hot inner
loops of the tensor engine. A compiled Cython extension implements them;
a pure-numpy fallback keeps the package importable without a compiler.
Set ``SE2VAE_FORCE_PYTHON=1`` to force the fallback (used by the benchmark
and to reproduce results without the extension).
"""

import os

from . import _kernels_py

if os.environ.get("SE2VAE_FORCE_PYTHON") == "1":
    kernels = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels_c as kernels  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:
        kernels = _kernels_py
        BACKEND = "python"


def backend_name() -> str:
    return BACKEND
