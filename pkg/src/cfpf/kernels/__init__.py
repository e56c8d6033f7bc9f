"""Solver kernels with a compiled core and a numpy fallback.

The compiled extension (``_native``, built from Cython) is used when it
imports; otherwise the pure-numpy ``_reference`` module is used.  Set
``CFPF_BACKEND=python`` to force the fallback or ``CFPF_BACKEND=native`` to
fail loudly when the extension is missing.

Both backends implement the same operations with identical semantics; they
agree to rounding but are not bit-identical to each other.
"""
import os

from . import _reference

try:
    from . import _native
except ImportError:  # extension not built
    _native = None

BACKENDS = {"python": _reference}
if _native is not None:
    BACKENDS["native"] = _native


def _select():
    want = os.environ.get("CFPF_BACKEND", "").strip().lower()
    if want == "python":
        return "python"
    if want == "native":
        if _native is None:
            raise ImportError("CFPF_BACKEND=native but the compiled extension is not built")
        return "native"
    if want:
        raise ValueError(f"unknown CFPF_BACKEND {want!r}")
    return "native" if _native is not None else "python"


ACTIVE = _select()


def get(name: str | None = None):
    """Kernel module for ``name`` (``"native"``/``"python"``) or the active one."""
    if name is None:
        name = ACTIVE
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}") from None
