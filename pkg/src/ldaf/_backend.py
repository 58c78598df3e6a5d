"""Kernel backend selection.

The compiled extension is preferred when importable; the pure-NumPy
fallback is picked up transparently otherwise, or forced by setting
LDAF_PURE_PYTHON=1 before import. Both expose the same functions; the
benchmark script under benchmarks/ compares them directly.
"""

import os

from . import _kernels_py

if os.environ.get("LDAF_PURE_PYTHON", "") == "1":
    _ACTIVE = _kernels_py
else:
    try:
        from . import _kernels as _compiled

        _ACTIVE = _compiled
    except ImportError:
        _ACTIVE = _kernels_py


def active():
    """The module providing the kernel functions for this process."""
    return _ACTIVE


def active_name():
    return _ACTIVE.BACKEND_NAME
