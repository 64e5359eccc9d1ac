"""Numba-compiled inner loops.

Everything here is called with plain numpy arrays and scalars; the wrapping
modules own validation and locking.  Winner comparisons in the recursive
update run in float64 regardless of the state storage dtype so that the
selected winners are identical to the float64 batch reference.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def push_events(v, w, cells, ts, table, tau_us, inv_tau64):
    """Recursive per-event update of the global feature state.

    v : (K,) float32/float64 — raw winner value per channel (signed LUT entry,
        undecayed); magnitude is |v|, phase is 0 for v >= 0 else pi.
    w : (K,) int64 — winner write timestamp per channel.
    cells : (n,) int64 — LUT row index per event, time-ordered.
    ts : (n,) int64 — event timestamps (non-decreasing).
    table : (cells, K) float32 — per-(x, y, p) feature table.

    A channel's decayed magnitude at time t is
    ``max(|v| - (t - w) * inv_tau, 0)``, exactly zero once ``t - w >= tau``
    (integer comparison).  A new event takes a channel when its magnitude is
    >= the decayed value (ties go to the newer event).
    """
    k_channels = v.shape[0]
    for i in range(cells.shape[0]):
        t = ts[i]
        row = table[cells[i]]
        for k in range(k_channels):
            dt = t - w[k]
            if dt >= tau_us:
                dec = 0.0
            else:
                dec = np.float64(np.abs(v[k])) - np.float64(dt) * inv_tau64
                if dec < 0.0:
                    dec = 0.0
            if np.float64(np.abs(row[k])) >= dec:
                v[k] = row[k]
                w[k] = t


@njit(cache=True, nogil=True)
def neighbor_filter_mask(xs, ys, ts, width, height, t_nn_us):
    """Keep events with a strictly earlier event in their 3x3 neighborhood
    within the preceding ``t_nn_us`` microseconds.

    Events sharing a timestamp are judged against earlier timestamps only,
    so the result is invariant to their relative order.
    """
    n = xs.shape[0]
    keep = np.zeros(n, dtype=np.bool_)
    last = np.full((height, width), np.int64(-(2**62)), dtype=np.int64)
    i = 0
    while i < n:
        j = i
        while j < n and ts[j] == ts[i]:
            j += 1
        for m in range(i, j):
            t = ts[m]
            x = np.int64(xs[m])
            y = np.int64(ys[m])
            x0 = x - 1 if x > 0 else 0
            x1 = x + 1 if x + 1 < width else width - 1
            y0 = y - 1 if y > 0 else 0
            y1 = y + 1 if y + 1 < height else height - 1
            found = False
            for yy in range(y0, y1 + 1):
                for xx in range(x0, x1 + 1):
                    if t - last[yy, xx] <= t_nn_us:
                        found = True
                        break
                if found:
                    break
            keep[m] = found
        for m in range(i, j):
            last[ys[m], xs[m]] = ts[m]
        i = j
    return keep


@njit(cache=True, nogil=True)
def refractory_filter_mask(xs, ys, ts, width, height, t_ref_us):
    """Drop events closer than ``t_ref_us`` to the previous kept event at the
    same pixel (kept again once the full period has elapsed)."""
    n = xs.shape[0]
    keep = np.zeros(n, dtype=np.bool_)
    last_kept = np.full((height, width), np.int64(-(2**62)), dtype=np.int64)
    for i in range(n):
        x = xs[i]
        y = ys[i]
        if ts[i] - last_kept[y, x] >= t_ref_us:
            keep[i] = True
            last_kept[y, x] = ts[i]
    return keep
