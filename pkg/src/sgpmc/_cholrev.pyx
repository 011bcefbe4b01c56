# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel: reverse-mode differentiation through the Cholesky factor.

Sequential adjoint of the column-oriented Cholesky recurrence.  Runs in
O(n^3) with contiguous row access; the pure-numpy fallback in sgpmc.linalg
computes the same quantity through triangular solves.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def chol_rev(double[:, ::1] L, double[:, ::1] Lbar):
    """Adjoint of K -> chol(K) restricted to the lower triangle.

    Given the lower Cholesky factor ``L`` of ``K`` and the adjoint ``Lbar``
    of a scalar function with respect to ``L`` (only the lower triangle is
    read), returns the lower-triangular adjoint with respect to the lower
    triangle of ``K`` treated as independent entries.
    """
    cdef Py_ssize_t n = L.shape[0]
    if L.shape[1] != n or Lbar.shape[0] != n or Lbar.shape[1] != n:
        raise ValueError("L and Lbar must be square and of equal dimension")

    Lb_arr = np.tril(np.asarray(Lbar)).copy()
    Ab_arr = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] Lb = Lb_arr
    cdef double[:, ::1] Ab = Ab_arr

    cdef Py_ssize_t i, j, k
    cdef double tbar, sbar, djj

    for j in range(n - 1, -1, -1):
        djj = L[j, j]
        for i in range(j + 1, n):
            tbar = Lb[i, j] / djj
            Lb[j, j] -= Lb[i, j] * L[i, j] / djj
            Ab[i, j] = tbar
            for k in range(j):
                Lb[i, k] -= tbar * L[j, k]
                Lb[j, k] -= tbar * L[i, k]
        sbar = Lb[j, j] / (2.0 * djj)
        Ab[j, j] = sbar
        for k in range(j):
            Lb[j, k] -= 2.0 * sbar * L[j, k]

    return Ab_arr
