"""Kernel dispatch.

Uses the compiled ``fedci._kernels`` extension when it is importable and
``FEDCI_PURE_PYTHON`` is unset; otherwise the numpy implementations in
``fedci._kernels_py``. ``BACKEND`` names the active one.
"""
import os

import numpy as np

from . import _kernels_py

if os.environ.get("FEDCI_PURE_PYTHON"):
    _ext = None
else:
    try:
        from . import _kernels as _ext
    except ImportError:  # extension not built
        _ext = None

BACKEND = "cython" if _ext is not None else "python"


def cox_breslow(X, eta, event, time):
    X = np.ascontiguousarray(X, dtype=np.float64)
    eta = np.ascontiguousarray(eta, dtype=np.float64)
    event = np.ascontiguousarray(event, dtype=np.int8)
    time = np.ascontiguousarray(time, dtype=np.float64)
    if _ext is None:
        return _kernels_py.cox_breslow(X, eta, event, time)
    return _ext.cox_breslow(X, eta, event, time)


def event_table(time, delta, n_causes):
    time = np.ascontiguousarray(time, dtype=np.float64)
    delta = np.ascontiguousarray(delta, dtype=np.int64)
    if _ext is None:
        return _kernels_py.event_table(time, delta, n_causes)
    return _ext.event_table(time, delta, int(n_causes))
