# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled implementations of the hot kernels.

Mirrors ``_kernels_py`` exactly: same elementwise operations in the same
order, same any-NaN-column contract, same in-place accumulator semantics.
Must be built without value-changing float optimisations (no -ffast-math),
otherwise the NaN/inf handling and the bitwise agreement with the numpy
backend both break.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport NAN, isfinite, isnan
from libc.stdlib cimport free, malloc

cnp.import_array()


cdef void _insertion_sort(double *a, Py_ssize_t lo, Py_ssize_t hi) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double key
    for i in range(lo + 1, hi + 1):
        key = a[i]
        j = i - 1
        while j >= lo and a[j] > key:
            a[j + 1] = a[j]
            j -= 1
        a[j + 1] = key


cdef void _sort(double *a, Py_ssize_t n) noexcept nogil:
    # Median-of-three quicksort with an explicit stack; the larger partition
    # is pushed and the smaller iterated, so depth stays below 64 for any
    # input that fits in memory.  Small ranges go to insertion sort.
    cdef Py_ssize_t stack_lo[64]
    cdef Py_ssize_t stack_hi[64]
    cdef int top
    cdef Py_ssize_t lo, hi, mid, i, j
    cdef double pivot, tmp
    if n < 2:
        return
    stack_lo[0] = 0
    stack_hi[0] = n - 1
    top = 1
    while top > 0:
        top -= 1
        lo = stack_lo[top]
        hi = stack_hi[top]
        while hi - lo > 32:
            mid = lo + (hi - lo) // 2
            if a[mid] < a[lo]:
                tmp = a[mid]; a[mid] = a[lo]; a[lo] = tmp
            if a[hi] < a[lo]:
                tmp = a[hi]; a[hi] = a[lo]; a[lo] = tmp
            if a[hi] < a[mid]:
                tmp = a[hi]; a[hi] = a[mid]; a[mid] = tmp
            pivot = a[mid]
            i = lo
            j = hi
            while i <= j:
                while a[i] < pivot:
                    i += 1
                while a[j] > pivot:
                    j -= 1
                if i <= j:
                    tmp = a[i]; a[i] = a[j]; a[j] = tmp
                    i += 1
                    j -= 1
            if j - lo > hi - i:
                stack_lo[top] = lo
                stack_hi[top] = j
                top += 1
                lo = i
            else:
                stack_lo[top] = i
                stack_hi[top] = hi
                top += 1
                hi = j
        _insertion_sort(a, lo, hi)


cdef Py_ssize_t _hoare_split(double *a, Py_ssize_t lo, Py_ssize_t hi) noexcept nogil:
    # Hoare partition of a[lo:hi) around the median-of-three, which is moved
    # to a[lo] first.  Returns j with a[lo..j] <= a[j+1..hi-1]; both sides
    # are nonempty, so callers always make progress.
    cdef Py_ssize_t mid = lo + (hi - lo) // 2
    cdef Py_ssize_t last = hi - 1
    cdef Py_ssize_t i, j
    cdef double tmp, pivot
    if a[mid] < a[lo]:
        tmp = a[mid]; a[mid] = a[lo]; a[lo] = tmp
    if a[last] < a[lo]:
        tmp = a[last]; a[last] = a[lo]; a[lo] = tmp
    if a[last] < a[mid]:
        tmp = a[last]; a[last] = a[mid]; a[mid] = tmp
    tmp = a[lo]; a[lo] = a[mid]; a[mid] = tmp
    pivot = a[lo]
    i = lo - 1
    j = hi
    while True:
        i += 1
        while a[i] < pivot:
            i += 1
        j -= 1
        while a[j] > pivot:
            j -= 1
        if i >= j:
            return j
        tmp = a[i]; a[i] = a[j]; a[j] = tmp


cdef void _multiselect(double *a, Py_ssize_t lo, Py_ssize_t hi,
                       Py_ssize_t *pos, Py_ssize_t klo, Py_ssize_t khi) noexcept nogil:
    # Places the (pos[t]+1)-th smallest element of the original range at
    # a[pos[t]] for every requested 0-based position in pos[klo:khi], which
    # must be ascending.  Quickselect generalized to several ranks: partition,
    # recurse into the left block of requested positions, iterate the right.
    cdef Py_ssize_t j, t
    while khi > klo:
        if hi - lo <= 32:
            _insertion_sort(a, lo, hi - 1)
            return
        j = _hoare_split(a, lo, hi)
        t = klo
        while t < khi and pos[t] <= j:
            t += 1
        if t > klo:
            _multiselect(a, lo, j + 1, pos, klo, t)
        klo = t
        lo = j + 1


def order_stats(const double[:, ::1] values, const cnp.int64_t[::1] ranks):
    """Selected order statistics of each column: out[j, :] = ranks[j]-th smallest.

    Full sort per column when many ranks are requested; partition-based
    multiselect when the rank set is sparse (selection is linear in n, which
    is what the conformal calibration path needs: thousands of scores, one
    or two ranks).
    """
    cdef Py_ssize_t n = values.shape[0]
    cdef Py_ssize_t p = values.shape[1]
    cdef Py_ssize_t r = ranks.shape[0]
    cdef Py_ssize_t i, j, k, t
    cdef double v
    cdef bint has_nan
    cdef bint sparse = 4 * r < n
    out_arr = np.empty((r, p), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double *buf = <double *> malloc(n * sizeof(double))
    cdef Py_ssize_t *pos = <Py_ssize_t *> malloc((r if r > 0 else 1) * sizeof(Py_ssize_t))
    if buf == NULL or pos == NULL:
        free(buf)
        free(pos)
        raise MemoryError("order statistic buffer allocation failed")
    try:
        with nogil:
            for k in range(r):
                i = ranks[k] - 1
                t = k - 1
                while t >= 0 and pos[t] > i:
                    pos[t + 1] = pos[t]
                    t -= 1
                pos[t + 1] = i
            for j in range(p):
                has_nan = False
                for i in range(n):
                    v = values[i, j]
                    if isnan(v):
                        has_nan = True
                        break
                    buf[i] = v
                if has_nan:
                    for k in range(r):
                        out[k, j] = NAN
                    continue
                if sparse:
                    _multiselect(buf, 0, n, pos, 0, r)
                else:
                    _sort(buf, n)
                for k in range(r):
                    out[k, j] = buf[ranks[k] - 1]
    finally:
        free(buf)
        free(pos)
    return out_arr


def interval_accumulate(const double[::1] lower, const double[::1] upper, const double[::1] truth,
                        double alpha,
                        cnp.int64_t[::1] cover_sum, cnp.int64_t[::1] cover_cnt,
                        double[::1] score_sum, double[::1] width_sum,
                        cnp.int64_t[::1] bounded_cnt):
    """Fold one record's intervals into per-point running sums.

    Same contract as the numpy version: NaN anywhere at a point skips it,
    infinite endpoints count toward coverage only.
    """
    cdef Py_ssize_t p = truth.shape[0]
    cdef Py_ssize_t j
    cdef double coef = 2.0 / alpha
    cdef double l, u, x, w, pb, pa
    with nogil:
        for j in range(p):
            l = lower[j]
            u = upper[j]
            x = truth[j]
            if isnan(l) or isnan(u) or isnan(x):
                continue
            cover_cnt[j] += 1
            if l <= x <= u:
                cover_sum[j] += 1
            if isfinite(l) and isfinite(u):
                w = u - l
                pb = coef * (l - x) if x < l else 0.0
                pa = coef * (x - u) if x > u else 0.0
                score_sum[j] += (w + pb) + pa
                width_sum[j] += w
                bounded_cnt[j] += 1


def pinball_accumulate(const double[::1] quantile, const double[::1] truth, double gamma,
                       double[::1] qs_sum, cnp.int64_t[::1] qs_cnt):
    """Fold one record's pinball losses at level gamma into running sums."""
    cdef Py_ssize_t p = truth.shape[0]
    cdef Py_ssize_t j
    cdef double om = 1.0 - gamma
    cdef double q, x
    with nogil:
        for j in range(p):
            q = quantile[j]
            x = truth[j]
            if isnan(q) or isnan(x):
                continue
            qs_cnt[j] += 1
            if x > q:
                qs_sum[j] += gamma * (x - q)
            else:
                qs_sum[j] += om * (q - x)
