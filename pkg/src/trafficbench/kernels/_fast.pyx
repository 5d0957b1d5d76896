# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Must match kernels._fallback bit-for-bit."""

import numpy as np

cimport numpy as cnp

cnp.import_array()

IMPL = "compiled"


def motif_scan(const cnp.float64_t[::1] x, double threshold, long half_window):
    cdef long n = x.shape[0]
    cdef long i = 0, j, k, run_start, run_stop
    cdef bint left_ok, right_ok
    centers, starts, stops = [], [], []
    while i < n:
        if x[i] <= threshold:
            i += 1
            continue
        run_start = i
        while i < n and x[i] > threshold:
            i += 1
        run_stop = i
        j = run_start
        while j < run_stop:
            k = j
            while k + 1 < run_stop and x[k + 1] == x[j]:
                k += 1
            left_ok = j == run_start or x[j - 1] < x[j]
            right_ok = k == run_stop - 1 or x[k + 1] < x[j]
            if left_ok and right_ok:
                centers.append(j)
                starts.append(max(run_start, j - half_window))
                stops.append(min(run_stop, j + half_window + 1))
            j = k + 1
    return (
        np.asarray(centers, dtype=np.int64),
        np.asarray(starts, dtype=np.int64),
        np.asarray(stops, dtype=np.int64),
    )


def buffered_flatten(const cnp.float64_t[::1] x, double cap):
    cdef long n = x.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef cnp.float64_t[::1] o = out
    cdef double carry = 0.0, avail
    cdef long i
    for i in range(n):
        avail = x[i] + carry
        if avail > cap:
            o[i] = cap
            carry = avail - cap
        else:
            o[i] = avail
            carry = 0.0
    return out, carry


def draw_polyline(cnp.float64_t[:, :, ::1] img, const cnp.int64_t[::1] xs, const cnp.int64_t[::1] ys, long channel):
    cdef long h = img.shape[0]
    cdef long i, n = xs.shape[0]
    for i in range(n - 1):
        _bresenham(img, xs[i], ys[i], xs[i + 1], ys[i + 1], channel, h)
    if n == 1:
        img[h - 1 - ys[0], xs[0], channel] = 1.0


cdef void _bresenham(cnp.float64_t[:, :, ::1] img, long x0, long y0, long x1, long y1, long channel, long h):
    cdef long dx = x1 - x0 if x1 >= x0 else x0 - x1
    cdef long dy = -(y1 - y0 if y1 >= y0 else y0 - y1)
    cdef long sx = 1 if x0 < x1 else -1
    cdef long sy = 1 if y0 < y1 else -1
    cdef long err = dx + dy, e2
    while True:
        img[h - 1 - y0, x0, channel] = 1.0
        if x0 == x1 and y0 == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy
