# cython: boundscheck=False, wraparound=False, cdivision=True
"""Cython implementation of the hot indexing kernels.

Must stay bit-identical to _pykernels: same cell-code byte layout, same
seeded FNV-1a, same rounding (half away from zero).
"""

from libc.math cimport floor, ceil, fabs, sqrt
from libc.stdio cimport snprintf
from libc.string cimport strlen

import numpy as np

BACKEND = "cython"

cdef unsigned long long FNV_OFFSET = 0xCBF29CE484222325ULL
cdef unsigned long long FNV_PRIME = 0x100000001B3ULL
cdef double SQRT3 = sqrt(3.0)


cdef unsigned long long _fnv1a64(const char* data, int n, unsigned long long seed) nogil:
    cdef unsigned long long h = FNV_OFFSET ^ seed
    cdef int i
    for i in range(n):
        h ^= <unsigned char>data[i]
        h *= FNV_PRIME
    return h


def fnv1a64(bytes data, seed):
    cdef unsigned long long s = <unsigned long long>(seed & 0xFFFFFFFFFFFFFFFF)
    return _fnv1a64(data, len(data), s)


cdef long long _round_half_away(double v) nogil:
    if v >= 0.0:
        return <long long>floor(v + 0.5)
    return <long long>ceil(v - 0.5)


cdef void _hex_axial(double x, double y, double edge, long long* q_out, long long* r_out) nogil:
    cdef double qf = (SQRT3 / 3.0 * x - y / 3.0) / edge
    cdef double rf = (2.0 / 3.0 * y) / edge
    cdef double sf = -qf - rf
    cdef long long q = _round_half_away(qf)
    cdef long long r = _round_half_away(rf)
    cdef long long s = _round_half_away(sf)
    cdef double dq = fabs(q - qf)
    cdef double dr = fabs(r - rf)
    cdef double ds = fabs(s - sf)
    if dq > dr and dq > ds:
        q = -r - s
    elif dr > ds:
        r = -q - s
    q_out[0] = q
    r_out[0] = r


def activation_indices_batch(
    double[::1] xs,
    double[::1] ys,
    long long[::1] ts,
    double[::1] edges,
    double[::1] offx,
    double[::1] offy,
    long long[::1] widths,
    long long[::1] phases,
    seed,
    memory_size,
):
    cdef Py_ssize_t n_pts = xs.shape[0]
    cdef Py_ssize_t n_layers = edges.shape[0]
    cdef unsigned long long s = <unsigned long long>(seed & 0xFFFFFFFFFFFFFFFF)
    cdef unsigned long long a = <unsigned long long>memory_size
    out = np.empty((n_pts, n_layers), dtype=np.int64)
    cdef long long[:, ::1] ov = out
    cdef Py_ssize_t i, j
    cdef long long q, r, tb, t
    cdef char buf[128]
    cdef int nch
    with nogil:
        for i in range(n_pts):
            t = ts[i]
            for j in range(n_layers):
                _hex_axial(xs[i] + offx[j], ys[i] + offy[j], edges[j], &q, &r)
                # C integer division truncates; match Python floor division.
                tb = (t + phases[j]) // widths[j]
                if (t + phases[j]) % widths[j] != 0 and (t + phases[j]) < 0:
                    tb -= 1
                nch = snprintf(buf, sizeof(buf), "L%lld|%lld|%lld|%lld",
                               <long long>j, q, r, tb)
                ov[i, j] = <long long>(_fnv1a64(buf, nch, s) % a)
    return out
