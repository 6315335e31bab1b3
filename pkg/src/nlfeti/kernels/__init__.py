"""Kernel backend selection.

The compiled Cython core is preferred when importable; the pure numpy
fallback implements identical semantics.  Set NLFETI_KERNELS=python or
NLFETI_KERNELS=compiled to force a choice (the latter raises if the
extension is missing).
"""

import os

from nlfeti.kernels import fallback

_choice = os.environ.get("NLFETI_KERNELS", "auto").lower()

if _choice not in ("auto", "python", "compiled"):
    raise ValueError(f"NLFETI_KERNELS must be auto|python|compiled, got {_choice!r}")

if _choice == "python":
    active = fallback
else:
    try:
        from nlfeti.kernels import _core as active
    except ImportError:
        if _choice == "compiled":
            raise ImportError("nlfeti kernels: compiled core requested via "
                              "NLFETI_KERNELS=compiled but the extension is not built")
        active = fallback


def backend_name():
    """Name of the kernel implementation in use ("compiled" or "python")."""
    return active.name


def get_kernels(which=None):
    """Return a kernel module: the active one, or an explicit implementation."""
    if which in (None, "active"):
        return active
    if which == "python":
        return fallback
    if which == "compiled":
        from nlfeti.kernels import _core
        return _core
    raise ValueError(f"unknown kernel implementation {which!r}")
