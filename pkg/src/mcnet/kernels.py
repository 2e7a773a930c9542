"""Backend selection for the hot loop kernels.

The compiled extension is preferred; set ``MCNET_BACKEND=python`` to force
the numpy fallback (or ``cython`` to fail loudly if the extension is missing).
"""

import importlib
import os

_NAMES = {"cython": "mcnet._ckernels", "python": "mcnet._pykernels"}


def load_backend(name):
    """Import and return the kernel module for ``name`` ("cython" or "python")."""
    if name not in _NAMES:
        raise ValueError(f"unknown kernel backend {name!r}; expected one of {sorted(_NAMES)}")
    return importlib.import_module(_NAMES[name])


def available_backends():
    out = []
    for name in _NAMES:
        try:
            load_backend(name)
        except ImportError:
            continue
        out.append(name)
    return out


def _select():
    requested = os.environ.get("MCNET_BACKEND", "").strip().lower()
    if requested:
        return requested, load_backend(requested)
    try:
        return "cython", load_backend("cython")
    except ImportError:
        return "python", load_backend("python")


_EXPORTS = ("im2col", "col2im", "maxpool_forward", "maxpool_backward")


def _bind(name, module):
    global BACKEND
    BACKEND = name
    for fn in _EXPORTS:
        globals()[fn] = getattr(module, fn)


def use_backend(name):
    """Switch every layer to the ``name`` kernels; returns the previous backend name."""
    previous = BACKEND
    _bind(name, load_backend(name))
    return previous


_bind(*_select())
