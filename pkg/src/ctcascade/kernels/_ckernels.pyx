# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels. See ``_fallback.py`` for contracts."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor
from libc.string cimport memcpy

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int kh, int kw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef int ph = (kh - 1) // 2, pw = (kw - 1) // 2
    cdef Py_ssize_t b, ch, i, j, y, xx, sy, row, x0, x1, base
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c * kh * kw, h * w), dtype=dtype)
    cdef real[:, :, ::1] cols = out
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        # output columns whose source x + j - pw lies inside [0, w)
                        x0 = pw - j if pw > j else 0
                        x1 = w + pw - j if j > pw else w
                        for y in range(h):
                            sy = y + i - ph
                            if sy < 0 or sy >= h:
                                continue
                            if x1 > x0:
                                memcpy(&cols[b, row, y * w + x0], &x[b, ch, sy, x0 + j - pw],
                                       (x1 - x0) * sizeof(real))
    return out


def col2im(real[:, :, ::1] cols, shape, int kh, int kw):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef int ph = (kh - 1) // 2, pw = (kw - 1) // 2
    cdef Py_ssize_t b, ch, i, j, y, xx, sy, row, x0, x1, base
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] dx = out
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        x0 = pw - j if pw > j else 0
                        x1 = w + pw - j if j > pw else w
                        for y in range(h):
                            sy = y + i - ph
                            if sy < 0 or sy >= h:
                                continue
                            base = y * w
                            for xx in range(x0, x1):
                                dx[b, ch, sy, xx + j - pw] += cols[b, row, base + xx]
    return out


cdef inline double _sample(const double[:, ::1] img, double r, double c) noexcept nogil:
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1]
    cdef double fr0 = floor(r), fc0 = floor(c)
    cdef double fr = r - fr0, fc = c - fc0
    cdef Py_ssize_t r0 = <Py_ssize_t>fr0, c0 = <Py_ssize_t>fc0
    cdef double total = 0.0
    if r0 >= 0 and r0 < h:
        if c0 >= 0 and c0 < w:
            total += (1.0 - fr) * (1.0 - fc) * img[r0, c0]
        if c0 + 1 >= 0 and c0 + 1 < w:
            total += (1.0 - fr) * fc * img[r0, c0 + 1]
    if r0 + 1 >= 0 and r0 + 1 < h:
        if c0 >= 0 and c0 < w:
            total += fr * (1.0 - fc) * img[r0 + 1, c0]
        if c0 + 1 >= 0 and c0 + 1 < w:
            total += fr * fc * img[r0 + 1, c0 + 1]
    return total


def radon_project(image, const double[::1] cos_t, const double[::1] sin_t,
                  const double[::1] det_pos, const double[::1] ray_pos, double center):
    cdef const double[:, ::1] img = np.ascontiguousarray(image, dtype=np.float64)
    cdef Py_ssize_t na = cos_t.shape[0], nd = det_pos.shape[0], nr = ray_pos.shape[0]
    out = np.empty((na, nd), dtype=np.float64)
    cdef double[:, ::1] sino = out
    cdef Py_ssize_t a, d, m
    cdef double t, s, acc, ct, st
    with nogil:
        for a in range(na):
            ct = cos_t[a]
            st = sin_t[a]
            for d in range(nd):
                t = det_pos[d]
                acc = 0.0
                for m in range(nr):
                    s = ray_pos[m]
                    acc += _sample(img, t * st + s * ct + center, t * ct - s * st + center)
                sino[a, d] = acc
    return out


def backproject(filtered, const double[::1] cos_t, const double[::1] sin_t,
                double det_start, double det_step, Py_ssize_t size, double center):
    cdef const double[:, ::1] proj = np.ascontiguousarray(filtered, dtype=np.float64)
    cdef Py_ssize_t na = proj.shape[0], nd = proj.shape[1]
    out = np.zeros((size, size), dtype=np.float64)
    cdef double[:, ::1] image = out
    cdef Py_ssize_t a, r, c, i0, i1
    cdef double x, y, pos, fi, frac, v0, v1
    with nogil:
        for a in range(na):
            for r in range(size):
                y = r - center
                for c in range(size):
                    x = c - center
                    pos = (x * cos_t[a] + y * sin_t[a] - det_start) / det_step
                    fi = floor(pos)
                    frac = pos - fi
                    i0 = <Py_ssize_t>fi
                    i1 = i0 + 1
                    v0 = proj[a, i0] if (i0 >= 0 and i0 < nd) else 0.0
                    v1 = proj[a, i1] if (i1 >= 0 and i1 < nd) else 0.0
                    image[r, c] += (1.0 - frac) * v0 + frac * v1
    return out


def aggregate_patches(patches, corners, shape, weights):
    cdef const double[:, :, ::1] pv = np.ascontiguousarray(patches, dtype=np.float64)
    cdef const long long[:, ::1] cv = np.ascontiguousarray(corners, dtype=np.int64)
    cdef const double[:, ::1] wv = np.ascontiguousarray(weights, dtype=np.float64)
    acc_arr = np.zeros(shape, dtype=np.float64)
    wsum_arr = np.zeros(shape, dtype=np.float64)
    cdef double[:, ::1] acc = acc_arr
    cdef double[:, ::1] wsum = wsum_arr
    cdef Py_ssize_t p, i, j, y, x
    cdef Py_ssize_t ph = wv.shape[0], pw = wv.shape[1]
    with nogil:
        for p in range(pv.shape[0]):
            y = cv[p, 0]
            x = cv[p, 1]
            for i in range(ph):
                for j in range(pw):
                    acc[y + i, x + j] += wv[i, j] * pv[p, i, j]
                    wsum[y + i, x + j] += wv[i, j]
    return acc_arr, wsum_arr
