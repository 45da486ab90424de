# Compiled nearest-centroid kernels. Semantics must stay in lockstep with
# _kernels_py.py: squared euclidean distance, argmin ties broken toward the
# lowest centroid index, accumulation over points in row order.

import numpy as np

cimport numpy as cnp

cnp.import_array()

cdef extern from "math.h":
    double INFINITY


def assign_nearest(double[:, ::1] points, double[:, ::1] centroids):
    """Assign each point to its nearest centroid by squared distance.

    Returns (codes, sqdists); ties go to the lowest centroid index.
    """
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t d = points.shape[1]
    cdef Py_ssize_t m = centroids.shape[0]
    if centroids.shape[1] != d:
        raise ValueError("points and centroids must share their dimension")

    codes_arr = np.empty(n, dtype=np.int64)
    dist_arr = np.empty(n, dtype=np.float64)
    cdef long long[::1] codes = codes_arr
    cdef double[::1] dists = dist_arr

    cdef Py_ssize_t i, j, k
    cdef double best, acc, diff
    cdef long long best_j
    for i in range(n):
        best = INFINITY
        best_j = 0
        for j in range(m):
            acc = 0.0
            for k in range(d):
                diff = points[i, k] - centroids[j, k]
                acc += diff * diff
                if acc > best:
                    break
            if acc < best:
                best = acc
                best_j = j
        codes[i] = best_j
        dists[i] = best
    return codes_arr, dist_arr


def update_means(double[:, ::1] points, long long[::1] codes, Py_ssize_t m):
    """Per-cluster mean of the assigned points.

    Empty clusters keep a zero mean and a zero count; repairing them is the
    caller's job.
    """
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t d = points.shape[1]
    if codes.shape[0] != n:
        raise ValueError("codes length must match the number of points")

    sums_arr = np.zeros((m, d), dtype=np.float64)
    counts_arr = np.zeros(m, dtype=np.int64)
    cdef double[:, ::1] sums = sums_arr
    cdef long long[::1] counts = counts_arr

    cdef Py_ssize_t i, k
    cdef long long c
    for i in range(n):
        c = codes[i]
        counts[c] += 1
        for k in range(d):
            sums[c, k] += points[i, k]
    for i in range(m):
        if counts[i] > 0:
            for k in range(d):
                sums[i, k] /= counts[i]
    return sums_arr, counts_arr
