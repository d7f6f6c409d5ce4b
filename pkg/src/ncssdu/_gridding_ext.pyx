# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled gather/scatter loops for Kaiser-Bessel gridding.

Both loops walk samples in index order (sample-major) so the floating-point
accumulation order matches the numpy fallback's ``bincount`` spread.
"""
import numpy as np

cimport numpy as cnp

cnp.import_array()


def interp(const double complex[:, ::1] grid,
           const cnp.int64_t[:, ::1] idx,
           const double[:, ::1] wts):
    """Gather grid values onto samples: out[b, m] = sum_k grid[b, idx[m, k]] * wts[m, k]."""
    cdef Py_ssize_t nb = grid.shape[0]
    cdef Py_ssize_t nm = idx.shape[0]
    cdef Py_ssize_t nk = idx.shape[1]
    cdef Py_ssize_t b, m, k
    cdef double re, im, w
    cdef double complex g
    out = np.empty((nb, nm), dtype=np.complex128)
    cdef double complex[:, ::1] o = out
    with nogil:
        for b in range(nb):
            for m in range(nm):
                re = 0.0
                im = 0.0
                for k in range(nk):
                    g = grid[b, idx[m, k]]
                    w = wts[m, k]
                    re = re + g.real * w
                    im = im + g.imag * w
                o[b, m] = re + 1j * im
    return out


def spread(const double complex[:, ::1] samples,
           const cnp.int64_t[:, ::1] idx,
           const double[:, ::1] wts,
           Py_ssize_t n_grid):
    """Scatter samples onto a flat grid: grid[b, idx[m, k]] += samples[b, m] * wts[m, k]."""
    cdef Py_ssize_t nb = samples.shape[0]
    cdef Py_ssize_t nm = idx.shape[0]
    cdef Py_ssize_t nk = idx.shape[1]
    cdef Py_ssize_t b, m, k, j
    cdef double sr, si, w
    re_out = np.zeros((nb, n_grid), dtype=np.float64)
    im_out = np.zeros((nb, n_grid), dtype=np.float64)
    cdef double[:, ::1] gr = re_out
    cdef double[:, ::1] gi = im_out
    with nogil:
        for b in range(nb):
            for m in range(nm):
                sr = samples[b, m].real
                si = samples[b, m].imag
                for k in range(nk):
                    j = idx[m, k]
                    w = wts[m, k]
                    gr[b, j] += sr * w
                    gi[b, j] += si * w
    return re_out + 1j * im_out
