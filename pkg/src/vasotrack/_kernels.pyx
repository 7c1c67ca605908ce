# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled voxel kernels.

Only the windowed extremum is compiled; everything else in the package is
numpy. The pure-numpy twin of every function here lives in
:mod:`vasotrack._fallback` and must return identical results.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.stdint cimport int64_t, int32_t

cnp.import_array()


cdef inline Py_ssize_t _clamp(Py_ssize_t v, Py_ssize_t hi) nogil:
    if v < 0:
        return 0
    if v > hi:
        return hi
    return v


def window_extreme(floating[:, :, ::1] x, const int32_t[:, :, ::1] offsets,
                   bint inner_max, bint outer_max):
    """Two-level windowed extremum with replicate padding.

    For every voxel ``p`` and every element ``e`` the inner reduction takes
    the max (or min) of ``x[clamp(p + o)]`` over the offsets ``o`` of ``e``;
    the outer reduction then takes the max (or min) across elements.

    Ties are broken toward the lowest linear source index, at both levels.

    Parameters
    ----------
    x : (Z, Y, X) float32 or float64, C-contiguous
    offsets : (E, K, 3) int32
    inner_max, outer_max : bool

    Returns
    -------
    out : (Z, Y, X) array, same dtype as ``x``
    src : (Z, Y, X) int64 linear index of the voxel each value came from
    """
    cdef Py_ssize_t Z = x.shape[0], Y = x.shape[1], X = x.shape[2]
    cdef Py_ssize_t E = offsets.shape[0], K = offsets.shape[1]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((Z, Y, X), dtype=dtype)
    src_arr = np.empty((Z, Y, X), dtype=np.int64)
    cdef floating[:, :, ::1] out = out_arr
    cdef int64_t[:, :, ::1] src = src_arr
    # per-row scratch for the inner reduction
    row_v_arr = np.empty(X, dtype=dtype)
    row_s_arr = np.empty(X, dtype=np.int64)
    cdef floating[::1] row_v = row_v_arr
    cdef int64_t[::1] row_s = row_s_arr
    cdef const floating* flat = &x[0, 0, 0]
    cdef Py_ssize_t z, y, xx, e, k, zz, yy, dx, lo, hi, xq
    cdef int64_t base, s
    cdef floating v, bv
    cdef int64_t bs
    cdef bint better

    with nogil:
        for z in range(Z):
            for y in range(Y):
                for e in range(E):
                    for k in range(K):
                        zz = _clamp(z + offsets[e, k, 0], Z - 1)
                        yy = _clamp(y + offsets[e, k, 1], Y - 1)
                        dx = offsets[e, k, 2]
                        base = (zz * Y + yy) * X
                        # columns whose shifted source stays in bounds
                        lo = -dx if dx < 0 else 0
                        hi = X - dx if dx > 0 else X
                        if lo > X:
                            lo = X
                        if hi < lo:
                            hi = lo
                        if k == 0:
                            for xx in range(X):
                                xq = _clamp(xx + dx, X - 1)
                                row_v[xx] = flat[base + xq]
                                row_s[xx] = base + xq
                            continue
                        for xx in range(lo):
                            s = base
                            v = flat[s]
                            if inner_max:
                                better = v > row_v[xx] or (v == row_v[xx] and s < row_s[xx])
                            else:
                                better = v < row_v[xx] or (v == row_v[xx] and s < row_s[xx])
                            if better:
                                row_v[xx] = v
                                row_s[xx] = s
                        if inner_max:
                            for xx in range(lo, hi):
                                s = base + xx + dx
                                v = flat[s]
                                bv = row_v[xx]
                                bs = row_s[xx]
                                better = (v > bv) | ((v == bv) & (s < bs))
                                row_v[xx] = v if better else bv
                                row_s[xx] = s if better else bs
                        else:
                            for xx in range(lo, hi):
                                s = base + xx + dx
                                v = flat[s]
                                bv = row_v[xx]
                                bs = row_s[xx]
                                better = (v < bv) | ((v == bv) & (s < bs))
                                row_v[xx] = v if better else bv
                                row_s[xx] = s if better else bs
                        for xx in range(hi, X):
                            s = base + X - 1
                            v = flat[s]
                            if inner_max:
                                better = v > row_v[xx] or (v == row_v[xx] and s < row_s[xx])
                            else:
                                better = v < row_v[xx] or (v == row_v[xx] and s < row_s[xx])
                            if better:
                                row_v[xx] = v
                                row_s[xx] = s
                    if e == 0:
                        for xx in range(X):
                            out[z, y, xx] = row_v[xx]
                            src[z, y, xx] = row_s[xx]
                        continue
                    for xx in range(X):
                        v = row_v[xx]
                        s = row_s[xx]
                        bv = out[z, y, xx]
                        bs = src[z, y, xx]
                        if outer_max:
                            better = (v > bv) | ((v == bv) & (s < bs))
                        else:
                            better = (v < bv) | ((v == bv) & (s < bs))
                        out[z, y, xx] = v if better else bv
                        src[z, y, xx] = s if better else bs
    return out_arr, src_arr


def scatter_add(const int64_t[::1] src, const double[::1] grad, Py_ssize_t n):
    """Accumulate ``grad`` into a length-``n`` float64 buffer at ``src``."""
    out_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, m = src.shape[0]
    with nogil:
        for i in range(m):
            out[src[i]] += grad[i]
    return out_arr
