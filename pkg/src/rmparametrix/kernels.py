"""Backend selection for the path loops.

The compiled extension is used when it imports and the drift belongs to the
slope/sine family; otherwise the numpy implementation runs. Setting
RMPARAMETRIX_BACKEND=python forces the fallback.
"""

import os

from . import _kernels_py as python_backend

try:
    from . import _kernels as compiled_backend
except ImportError:  # extension not built
    compiled_backend = None

_forced = os.environ.get("RMPARAMETRIX_BACKEND", "").lower()


def active(name=None):
    """Return the backend module to use ('compiled' or 'python')."""
    choice = (name or _forced or "compiled").lower()
    if choice == "compiled" and compiled_backend is not None:
        return compiled_backend
    return python_backend


def backend_name(name=None):
    return "compiled" if active(name) is compiled_backend and compiled_backend is not None else "python"
