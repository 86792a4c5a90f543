"""Kernel backend selection.

The compiled extension is preferred when it imported cleanly; setting
``PHASEREC_FORCE_PY=1`` in the environment forces the numpy fallback
(used by the benchmark to compare the two).
"""

import os

from . import _kernels_py

_impl = _kernels_py
if os.environ.get("PHASEREC_FORCE_PY") != "1":
    try:
        from . import _speedups as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _kernels_py


def backend_name() -> str:
    return _impl.NAME


def scatter_assemble(slots, vals, nnz):
    return _impl.scatter_assemble(slots, vals, nnz)


def pcg(indptr, indices, data, b, x, inv_diag, rtol, atol, maxiter):
    return _impl.pcg(indptr, indices, data, b, x, inv_diag, rtol, atol, maxiter)
