"""Pure-Python/NumPy implementations of the hot kernels.

Used when the compiled extension is unavailable; the compiled module in
``_fast.pyx`` must match these bit-for-bit.
"""

from __future__ import annotations

import numpy as np

IMPL = "python"


def motif_scan(x: np.ndarray, threshold: float, half_window: int):
    """Locate threshold-crossing bursts around local maxima.

    Returns three parallel int64 arrays (centers, starts, stops) where
    ``starts[i]:stops[i]`` is the contiguous above-threshold run around
    ``centers[i]``, truncated to ``centers[i] +/- half_window``.  A plateau
    of equal values yields its leftmost sample as the center; one run with
    a single maximum yields one motif.
    """
    n = len(x)
    centers, starts, stops = [], [], []
    i = 0
    while i < n:
        if x[i] <= threshold:
            i += 1
            continue
        # maximal above-threshold run [run_start, run_stop)
        run_start = i
        while i < n and x[i] > threshold:
            i += 1
        run_stop = i
        # local maxima inside the run (strictly greater than the previous
        # distinct value and >= the next; leftmost sample of a plateau)
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
        # merge duplicate-center plateaus is impossible: centers strictly
        # increase, so ordering by center holds by construction
    return (
        np.asarray(centers, dtype=np.int64),
        np.asarray(starts, dtype=np.int64),
        np.asarray(stops, dtype=np.int64),
    )


def buffered_flatten(x: np.ndarray, cap: float):
    """Cap a rate series at ``cap``, carrying excess bytes forward.

    Returns ``(flattened, carry)`` where ``carry`` is the rate-equivalent
    volume still buffered after the last sample.  Samples below the cap are
    topped up from the buffer, so total volume is conserved while any
    carry remains zero at the end.
    """
    out = np.empty_like(x)
    carry = 0.0
    for i in range(len(x)):
        avail = x[i] + carry
        if avail > cap:
            out[i] = cap
            carry = avail - cap
        else:
            out[i] = avail
            carry = 0.0
    return out, float(carry)


def draw_polyline(img: np.ndarray, xs: np.ndarray, ys: np.ndarray, channel: int) -> None:
    """Rasterize an integer-grid polyline into ``img[:, :, channel]``.

    Bresenham segments between consecutive points; no anti-aliasing, so
    output is bit-reproducible.  ``img`` is H x W x C with row 0 at the top.
    """
    h = img.shape[0]
    for i in range(len(xs) - 1):
        _bresenham(img, int(xs[i]), int(ys[i]), int(xs[i + 1]), int(ys[i + 1]), channel, h)
    if len(xs) == 1:
        img[h - 1 - int(ys[0]), int(xs[0]), channel] = 1.0


def _bresenham(img, x0, y0, x1, y1, channel, h):
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
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
