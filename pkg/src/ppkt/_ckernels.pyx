# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_pykernels``.

Loops visit elements in the same order as the numpy versions so the two
backends agree bit for bit.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def bilinear_fwd(const double[:, :, ::1] inp, const long[::1] y0, const long[::1] y1,
                 const double[::1] fy, const long[::1] x0, const long[::1] x1,
                 const double[::1] fx):
    cdef Py_ssize_t oh = y0.shape[0], ow = x0.shape[0], w = inp.shape[1], c = inp.shape[2]
    cdef Py_ssize_t t, u, x, k
    cdef double a, left
    r_arr = np.empty((oh, w, c))
    out_arr = np.empty((oh, ow, c))
    cdef double[:, :, ::1] r = r_arr
    cdef double[:, :, ::1] out = out_arr
    for t in range(oh):
        for x in range(w):
            for k in range(c):
                a = inp[y0[t], x, k]
                r[t, x, k] = a + fy[t] * (inp[y1[t], x, k] - a)
    for t in range(oh):
        for u in range(ow):
            for k in range(c):
                left = r[t, x0[u], k]
                out[t, u, k] = left + fx[u] * (r[t, x1[u], k] - left)
    return out_arr


def bilinear_bwd(const double[:, :, ::1] grad, Py_ssize_t h, Py_ssize_t w,
                 const long[::1] y0, const long[::1] y1, const double[::1] fy,
                 const long[::1] x0, const long[::1] x1, const double[::1] fx):
    cdef Py_ssize_t oh = grad.shape[0], ow = grad.shape[1], c = grad.shape[2]
    cdef Py_ssize_t t, u, x, k
    gr_arr = np.zeros((oh, w, c))
    gin_arr = np.zeros((h, w, c))
    cdef double[:, :, ::1] gr = gr_arr
    cdef double[:, :, ::1] gin = gin_arr
    for u in range(ow):
        for t in range(oh):
            for k in range(c):
                gr[t, x0[u], k] += grad[t, u, k] * (1.0 - fx[u])
    for u in range(ow):
        for t in range(oh):
            for k in range(c):
                gr[t, x1[u], k] += grad[t, u, k] * fx[u]
    for t in range(oh):
        for x in range(w):
            for k in range(c):
                gin[y0[t], x, k] += gr[t, x, k] * (1.0 - fy[t])
    for t in range(oh):
        for x in range(w):
            for k in range(c):
                gin[y1[t], x, k] += gr[t, x, k] * fy[t]
    return gin_arr


def segment_sum(const double[:, ::1] values, const long[::1] group, Py_ssize_t n_groups):
    cdef Py_ssize_t n = values.shape[0], d = values.shape[1], i, k
    out_arr = np.zeros((n_groups, d))
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        for k in range(d):
            out[group[i], k] += values[i, k]
    return out_arr


def col2im(const double[:, :, :, :, ::1] dcols, Py_ssize_t hp, Py_ssize_t wp, Py_ssize_t stride):
    cdef Py_ssize_t ho = dcols.shape[0], wo = dcols.shape[1], kk = dcols.shape[2], c = dcols.shape[4]
    cdef Py_ssize_t di, dj, i, j, ch
    dxp_arr = np.zeros((hp, wp, c))
    cdef double[:, :, ::1] dxp = dxp_arr
    for di in range(kk):
        for dj in range(kk):
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        dxp[di + stride * i, dj + stride * j, ch] += dcols[i, j, di, dj, ch]
    return dxp_arr


def ray_aabb_nearest(const double[::1] origin, const double[:, ::1] dirs,
                     const double[:, ::1] mins, const double[:, ::1] maxs, double t_eps):
    cdef Py_ssize_t p = dirs.shape[0], nb = mins.shape[0], i, b, a, ax_near
    cdef double lo, hi, d, inv, t1, t2, tlo, thi, tnear, tfar, best
    cdef long best_box, best_axis
    t_arr = np.full(p, np.inf)
    box_arr = np.full(p, -1, dtype=np.int64)
    ax_arr = np.full(p, -1, dtype=np.int64)
    cdef double[::1] t_out = t_arr
    cdef long[::1] box_out = box_arr
    cdef long[::1] ax_out = ax_arr
    for i in range(p):
        best = INFINITY
        best_box = -1
        best_axis = -1
        for b in range(nb):
            tnear = -INFINITY
            tfar = INFINITY
            ax_near = 0
            for a in range(3):
                lo = mins[b, a] - origin[a]
                hi = maxs[b, a] - origin[a]
                d = dirs[i, a]
                if d == 0.0:
                    if lo <= 0.0 and hi >= 0.0:
                        tlo = -INFINITY
                        thi = INFINITY
                    else:
                        tlo = INFINITY
                        thi = -INFINITY
                else:
                    inv = 1.0 / d
                    t1 = lo * inv
                    t2 = hi * inv
                    tlo = t1 if t1 < t2 else t2
                    thi = t2 if t1 < t2 else t1
                if a == 0 or tlo > tnear:
                    tnear = tlo
                    ax_near = a
                if thi < tfar:
                    tfar = thi
            if tnear <= tfar and tnear > t_eps and tnear < best:
                best = tnear
                best_box = b
                best_axis = ax_near
        if best_box >= 0:
            t_out[i] = best
            box_out[i] = best_box
            ax_out[i] = best_axis
    return t_arr, box_arr, ax_arr
