# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the per-pixel kernels in ``_pykernels``."""
import numpy as np
from libc.math cimport floor, sqrt


def consistency_error(const double[:, :, :, ::1] f_lr, const double[:, :, :, ::1] f_rl):
    cdef Py_ssize_t n = f_lr.shape[0], h = f_lr.shape[1], w = f_lr.shape[2]
    out_arr = np.empty((n, h, w), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, y, x, x0, y0, x1, y1, k
    cdef double tx, ty, wx, wy, s, e, top, bot
    cdef Py_ssize_t xmax = w - 2 if w > 1 else 0
    cdef Py_ssize_t ymax = h - 2 if h > 1 else 0
    for b in range(n):
        for y in range(h):
            for x in range(w):
                tx = x + f_lr[b, y, x, 0]
                ty = y + f_lr[b, y, x, 1]
                if tx < 0.0:
                    tx = 0.0
                elif tx > w - 1.0:
                    tx = w - 1.0
                if ty < 0.0:
                    ty = 0.0
                elif ty > h - 1.0:
                    ty = h - 1.0
                x0 = <Py_ssize_t>floor(tx)
                y0 = <Py_ssize_t>floor(ty)
                if x0 > xmax:
                    x0 = xmax
                if y0 > ymax:
                    y0 = ymax
                x1 = x0 + 1 if x0 + 1 < w else w - 1
                y1 = y0 + 1 if y0 + 1 < h else h - 1
                wx = tx - x0
                wy = ty - y0
                e = 0.0
                for k in range(2):
                    top = (1.0 - wx) * f_rl[b, y0, x0, k] + wx * f_rl[b, y0, x1, k]
                    bot = (1.0 - wx) * f_rl[b, y1, x0, k] + wx * f_rl[b, y1, x1, k]
                    s = f_lr[b, y, x, k] + ((1.0 - wy) * top + wy * bot)
                    e += s * s
                out[b, y, x] = sqrt(e)
    return out_arr


def hwarp(const double[:, :, :, ::1] img, const double[:, :, ::1] disp):
    cdef Py_ssize_t n = img.shape[0], h = img.shape[1], w = img.shape[2], c = img.shape[3]
    out_arr = np.zeros((n, h, w, c), dtype=np.float64)
    valid_arr = np.zeros((n, h, w), dtype=np.uint8)
    cdef double[:, :, :, ::1] out = out_arr
    cdef unsigned char[:, :, ::1] valid = valid_arr
    cdef Py_ssize_t b, y, x, k, x0, x1
    cdef double sx, fl, frac, a, v
    for b in range(n):
        for y in range(h):
            for x in range(w):
                sx = x + disp[b, y, x]
                if sx >= 0.0 and sx <= w - 1.0:
                    valid[b, y, x] = 1
                fl = floor(sx)
                frac = sx - fl
                if fl < -1.0 or fl > w:
                    continue
                x0 = <Py_ssize_t>fl
                x1 = x0 + 1
                for k in range(c):
                    a = img[b, y, x0, k] if 0 <= x0 < w else 0.0
                    v = img[b, y, x1, k] if 0 <= x1 < w else 0.0
                    out[b, y, x, k] = (1.0 - frac) * a + frac * v
    return out_arr, valid_arr


cdef inline void _sort9(double* v) noexcept nogil:
    cdef int i, j
    cdef double t
    for i in range(1, 9):
        t = v[i]
        j = i - 1
        while j >= 0 and v[j] > t:
            v[j + 1] = v[j]
            j -= 1
        v[j + 1] = t


def median3(const double[:, :, ::1] img):
    cdef Py_ssize_t n = img.shape[0], h = img.shape[1], w = img.shape[2]
    out_arr = np.empty((n, h, w), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double v[9]
    cdef Py_ssize_t b, y, x, dy, dx, yy, xx
    cdef int k
    for b in range(n):
        for y in range(h):
            for x in range(w):
                k = 0
                for dy in range(-1, 2):
                    yy = y + dy
                    if yy < 0:
                        yy = 0
                    elif yy >= h:
                        yy = h - 1
                    for dx in range(-1, 2):
                        xx = x + dx
                        if xx < 0:
                            xx = 0
                        elif xx >= w:
                            xx = w - 1
                        v[k] = img[b, yy, xx]
                        k += 1
                _sort9(v)
                out[b, y, x] = v[4]
    return out_arr
