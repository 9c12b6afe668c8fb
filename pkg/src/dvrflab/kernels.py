"""Backend selection for the mixture posterior kernel.

The compiled Cython extension is used when it was built; otherwise the numpy
version is used.  Set ``DVRFLAB_PURE=1`` to force the numpy path.
"""
import os

from . import _kernels_py

BACKEND = "python"
gmm_posterior = _kernels_py.gmm_posterior

if os.environ.get("DVRFLAB_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        gmm_posterior = _compiled.gmm_posterior
        BACKEND = "cython"


def get_backend(name: str):
    """Return the kernel function of a named backend (``"python"`` or ``"cython"``)."""
    if name == "python":
        return _kernels_py.gmm_posterior
    if name == "cython":
        from . import _kernels
        return _kernels.gmm_posterior
    raise ValueError(f"unknown backend {name!r}")
