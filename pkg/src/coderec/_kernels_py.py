"""Pure-numpy fallback for the compiled nearest-centroid kernels.

Keep the semantics in lockstep with _ckernels.pyx: squared euclidean
distance, argmin ties broken toward the lowest centroid index, per-cluster
sums accumulated over points in row order.
"""

import numpy as np

# Bound for the (chunk, m, d) distance temporary, in float64 elements.
_CHUNK_BUDGET = 4_000_000


def assign_nearest(points, centroids):
    """Assign each point to its nearest centroid by squared distance.

    Returns (codes, sqdists); ties go to the lowest centroid index.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    centroids = np.ascontiguousarray(centroids, dtype=np.float64)
    if points.shape[1] != centroids.shape[1]:
        raise ValueError("points and centroids must share their dimension")
    n = points.shape[0]
    m, d = centroids.shape
    codes = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float64)
    chunk = max(1, _CHUNK_BUDGET // max(1, m * d))
    for start in range(0, n, chunk):
        block = points[start:start + chunk]
        diff = block[:, None, :] - centroids[None, :, :]
        d2 = (diff * diff).sum(axis=2)
        codes[start:start + chunk] = d2.argmin(axis=1)
        dists[start:start + chunk] = d2[np.arange(len(block)),
                                        codes[start:start + chunk]]
    return codes, dists


def update_means(points, codes, m):
    """Per-cluster mean of the assigned points.

    Empty clusters keep a zero mean and a zero count; repairing them is the
    caller's job.
    """
    points = np.asarray(points, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.int64)
    if codes.shape[0] != points.shape[0]:
        raise ValueError("codes length must match the number of points")
    sums = np.zeros((m, points.shape[1]), dtype=np.float64)
    counts = np.bincount(codes, minlength=m).astype(np.int64)
    np.add.at(sums, codes, points)
    nonempty = counts > 0
    sums[nonempty] /= counts[nonempty, None]
    return sums, counts
