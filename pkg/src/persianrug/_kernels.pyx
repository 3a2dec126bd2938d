# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled training kernels.

The input batch and the ReLU backward signal are both mostly zeros, so the
encoder product and three of the four gradient products run over the
nonzero entries only. Rows of the (n_s x n_d) factor matrices are contiguous,
which turns every sparse product into a sequence of axpys.
"""

from libc.math cimport sqrt

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def csr_rows(real[:, ::1] x):
    """Nonzero structure of ``x`` as (indptr, indices, values)."""
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j, k = 0
    cdef Py_ssize_t nnz = 0
    for i in range(n):
        for j in range(m):
            if x[i, j] != 0:
                nnz += 1
    indptr_arr = np.empty(n + 1, dtype=np.intp)
    indices_arr = np.empty(nnz, dtype=np.intp)
    values_arr = np.empty(nnz, dtype=np.asarray(x).dtype)
    cdef Py_ssize_t[::1] indptr = indptr_arr
    cdef Py_ssize_t[::1] indices = indices_arr
    cdef real[::1] values = values_arr
    indptr[0] = 0
    for i in range(n):
        for j in range(m):
            if x[i, j] != 0:
                indices[k] = j
                values[k] = x[i, j]
                k += 1
        indptr[i + 1] = k
    return indptr_arr, indices_arr, values_arr


def csr_matmul(Py_ssize_t[::1] indptr, Py_ssize_t[::1] indices, real[::1] values,
               real[:, ::1] mat, real[:, ::1] out):
    """out[r] = sum_j x[r, j] * mat[j] for sparse x."""
    cdef Py_ssize_t n = out.shape[0], d = out.shape[1], r, k, j, c
    cdef real v
    with nogil:
        for r in range(n):
            for c in range(d):
                out[r, c] = 0
            for k in range(indptr[r], indptr[r + 1]):
                j = indices[k]
                v = values[k]
                for c in range(d):
                    out[r, c] += v * mat[j, c]


def csr_tmatmul(Py_ssize_t[::1] indptr, Py_ssize_t[::1] indices, real[::1] values,
                real[:, ::1] rows, real[:, ::1] out):
    """out[j] = sum_r x[r, j] * rows[r] for sparse x (i.e. x.T @ rows)."""
    cdef Py_ssize_t n = rows.shape[0], d = out.shape[1], r, k, j, c
    cdef real v
    with nogil:
        for j in range(out.shape[0]):
            for c in range(d):
                out[j, c] = 0
        for r in range(n):
            for k in range(indptr[r], indptr[r + 1]):
                j = indices[k]
                v = values[k]
                for c in range(d):
                    out[j, c] += v * rows[r, c]


def relu_residual(real[:, ::1] pre, real[:, ::1] x, real[::1] grad_b):
    """Fused ReLU, squared error and backward signal.

    Overwrites ``pre`` with ``dL/dpre`` for the batch-mean loss, writes the
    bias gradient into ``grad_b`` and returns ``(summed squared error,
    number of active units)``.
    """
    cdef Py_ssize_t n = pre.shape[0], m = pre.shape[1], i, j
    cdef Py_ssize_t active = 0
    cdef double total = 0.0, r
    cdef double scale = 2.0 / n
    with nogil:
        for j in range(m):
            grad_b[j] = 0
        for i in range(n):
            for j in range(m):
                if pre[i, j] > 0:
                    r = pre[i, j] - x[i, j]
                    total += r * r
                    pre[i, j] = <real>(scale * r)
                    grad_b[j] += pre[i, j]
                    active += 1
                else:
                    r = x[i, j]
                    total += r * r
                    pre[i, j] = 0
    return total, active


def relu_loss(real[:, ::1] pre, real[:, ::1] x):
    """Summed squared error of ReLU(pre) against x."""
    cdef Py_ssize_t n = pre.shape[0], m = pre.shape[1], i, j
    cdef double total = 0.0, r
    with nogil:
        for i in range(n):
            for j in range(m):
                r = (pre[i, j] if pre[i, j] > 0 else 0) - x[i, j]
                total += r * r
    return total


def adam_update(real[::1] param, real[::1] grad, real[::1] m, real[::1] v,
                double lr, double beta1, double beta2, double eps, long t):
    cdef Py_ssize_t n = param.shape[0], i
    cdef double bc1 = 1.0 - beta1 ** t
    cdef double bc2 = 1.0 - beta2 ** t
    cdef double step = lr / bc1
    cdef double inv_bc2 = 1.0 / bc2
    cdef double g, mi, vi
    with nogil:
        for i in range(n):
            g = grad[i]
            mi = beta1 * m[i] + (1.0 - beta1) * g
            vi = beta2 * v[i] + (1.0 - beta2) * g * g
            m[i] = <real>mi
            v[i] = <real>vi
            param[i] -= <real>(step * mi / (sqrt(vi * inv_bc2) + eps))
