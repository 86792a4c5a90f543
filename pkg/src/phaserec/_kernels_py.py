"""Pure-numpy implementations of the hot kernels.

Mirrors the API of the compiled module ``phaserec._speedups``; the active
implementation is chosen in :mod:`phaserec.backend`.
"""

import numpy as np

NAME = "python"


def scatter_assemble(slots, vals, nnz):
    """Accumulate per-entry contributions into CSR data slots.

    ``slots[k]`` is the position in the CSR data array that entry ``k``
    adds into (the mapping is precomputed once per sparsity pattern).
    """
    return np.bincount(slots, weights=vals, minlength=nnz)


def csr_matvec(indptr, indices, data, x, out):
    # scipy's compiled matvec, exposed with the same signature as the
    # cython kernel so the PCG driver below stays backend-agnostic
    from scipy.sparse import csr_matrix

    n = len(indptr) - 1
    a = csr_matrix((data, indices, indptr), shape=(n, n))
    out[:] = a.dot(x)
    return out


def pcg(indptr, indices, data, b, x, inv_diag, rtol, atol, maxiter):
    """Jacobi-preconditioned conjugate gradients on a CSR matrix.

    Iterates in place on ``x`` and returns ``(iterations, final_residual)``.
    A negative iteration count signals a breakdown (non-SPD operator).
    """
    from scipy.sparse import csr_matrix

    n = len(b)
    a = csr_matrix((data, indices, indptr), shape=(n, n))
    r = b - a.dot(x)
    target = max(rtol * np.linalg.norm(b), atol)
    resnorm = np.linalg.norm(r)
    if resnorm <= target:
        return 0, resnorm
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, maxiter + 1):
        ap = a.dot(p)
        pap = float(p @ ap)
        if pap <= 0.0:
            return -it, resnorm
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        resnorm = np.linalg.norm(r)
        if resnorm <= target:
            return it, resnorm
        z = inv_diag * r
        rz_new = float(r @ z)
        beta = rz_new / rz
        rz = rz_new
        p = z + beta * p
    return maxiter + 1, resnorm
