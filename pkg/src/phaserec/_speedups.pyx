# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: CSR PCG with fused vector updates and the
assembly scatter.  Selected at import by phaserec.backend when available."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

NAME = "cython"


def scatter_assemble(cnp.int64_t[::1] slots, cnp.float64_t[::1] vals, Py_ssize_t nnz):
    out = np.zeros(nnz, dtype=np.float64)
    cdef cnp.float64_t[::1] o = out
    cdef Py_ssize_t k, m = slots.shape[0]
    for k in range(m):
        o[slots[k]] += vals[k]
    return out


cdef void _matvec(cnp.int32_t[::1] indptr, cnp.int32_t[::1] indices,
                  cnp.float64_t[::1] data, cnp.float64_t[::1] x,
                  cnp.float64_t[::1] out) noexcept nogil:
    cdef Py_ssize_t i, j, n = indptr.shape[0] - 1
    cdef double acc
    for i in range(n):
        acc = 0.0
        for j in range(indptr[i], indptr[i + 1]):
            acc += data[j] * x[indices[j]]
        out[i] = acc


def csr_matvec(indptr, indices, data, x, out):
    _matvec(indptr, indices, data, x, out)
    return out


def pcg(cnp.int32_t[::1] indptr, cnp.int32_t[::1] indices,
        cnp.float64_t[::1] data, cnp.float64_t[::1] b,
        cnp.float64_t[::1] x, cnp.float64_t[::1] inv_diag,
        double rtol, double atol, long maxiter):
    """Jacobi-preconditioned CG; same contract as the numpy fallback."""
    cdef Py_ssize_t i, n = b.shape[0]
    cdef cnp.float64_t[::1] r = np.empty(n)
    cdef cnp.float64_t[::1] z = np.empty(n)
    cdef cnp.float64_t[::1] p = np.empty(n)
    cdef cnp.float64_t[::1] ap = np.empty(n)
    cdef double bnorm = 0.0, resnorm = 0.0, target, rz, rz_new, pap, alpha, beta
    cdef long it

    _matvec(indptr, indices, data, x, r)
    for i in range(n):
        r[i] = b[i] - r[i]
        bnorm += b[i] * b[i]
        resnorm += r[i] * r[i]
    bnorm = sqrt(bnorm)
    resnorm = sqrt(resnorm)
    target = rtol * bnorm
    if atol > target:
        target = atol
    if resnorm <= target:
        return 0, resnorm

    rz = 0.0
    for i in range(n):
        z[i] = inv_diag[i] * r[i]
        p[i] = z[i]
        rz += r[i] * z[i]

    for it in range(1, maxiter + 1):
        _matvec(indptr, indices, data, p, ap)
        pap = 0.0
        for i in range(n):
            pap += p[i] * ap[i]
        if pap <= 0.0:
            return -it, resnorm
        alpha = rz / pap
        resnorm = 0.0
        for i in range(n):
            x[i] += alpha * p[i]
            r[i] -= alpha * ap[i]
            resnorm += r[i] * r[i]
        resnorm = sqrt(resnorm)
        if resnorm <= target:
            return it, resnorm
        rz_new = 0.0
        for i in range(n):
            z[i] = inv_diag[i] * r[i]
            rz_new += r[i] * z[i]
        beta = rz_new / rz
        rz = rz_new
        for i in range(n):
            p[i] = z[i] + beta * p[i]
    return maxiter + 1, resnorm
