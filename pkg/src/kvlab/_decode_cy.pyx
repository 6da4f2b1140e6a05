# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled cached-decode attention kernel.

Same contract as kvlab._decode_py.attend_group_chunk; plain C loops with a
fixed accumulation order, no BLAS.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()


def attend_group_chunk(double[:, :, :] q, double[:, :] keys, double[:, :] values, int n_prior):
    cdef Py_ssize_t nq = q.shape[0]
    cdef Py_ssize_t g = q.shape[1]
    cdef Py_ssize_t d = q.shape[2]
    cdef Py_ssize_t nk = keys.shape[0]

    probs_arr = np.zeros((g, nq, nk), dtype=np.float64)
    out_arr = np.zeros((nq, g, d), dtype=np.float64)
    cdef double[:, :, :] probs = probs_arr
    cdef double[:, :, :] out = out_arr

    cdef double scale = 1.0 / sqrt(<double> d)
    cdef Py_ssize_t h, i, j, k, vis
    cdef double s, m, z, p, acc

    for h in range(g):
        for i in range(nq):
            vis = n_prior + i + 1
            if vis > nk:
                vis = nk
            m = -1e300
            for j in range(vis):
                s = 0.0
                for k in range(d):
                    s += q[i, h, k] * keys[j, k]
                s *= scale
                probs[h, i, j] = s
                if s > m:
                    m = s
            z = 0.0
            for j in range(vis):
                p = exp(probs[h, i, j] - m)
                probs[h, i, j] = p
                z += p
            for j in range(vis):
                probs[h, i, j] /= z
            for k in range(d):
                acc = 0.0
                for j in range(vis):
                    acc += probs[h, i, j] * values[j, k]
                out[i, h, k] = acc

    return probs_arr, out_arr
