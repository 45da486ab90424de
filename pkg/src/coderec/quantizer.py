"""Product-quantization codebooks: k-means, OPQ rotation learning, encoding.

An item's text embedding is rotated by a learned orthogonal matrix, split
into D sub-vectors, and each sub-vector is replaced by the index of its
nearest centroid, yielding a discrete length-D item code. Codebooks are
trained by alternating per-sub-space k-means with an orthogonal Procrustes
update of the rotation, which never increases the total quantization error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, DataError

ROTATION_TOL = 1e-6


@dataclass
class KMeansResult:
    centroids: np.ndarray     # (M, dim)
    assignments: np.ndarray   # (N,) int64
    inertia: float            # sum of squared distances at the final assignment
    # Objective recorded at every assignment step; non-increasing.
    history: list[float] = field(default_factory=list)


@dataclass
class OpqCodebook:
    """Learned rotation plus per-sub-space centroids.

    rotation maps row vectors as x @ rotation; centroids[k] holds the M
    candidate sub-vectors for sub-space k.
    """

    rotation: np.ndarray    # (d_w, d_w), orthogonal
    centroids: np.ndarray   # (D, M, sub_dim)

    @property
    def num_subspaces(self):
        return self.centroids.shape[0]

    @property
    def num_centroids(self):
        return self.centroids.shape[1]

    @property
    def sub_dim(self):
        return self.centroids.shape[2]

    @property
    def embed_dim(self):
        return self.rotation.shape[0]

    def validate(self):
        r = self.rotation
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise DataError("rotation must be square")
        if r.shape[0] != self.num_subspaces * self.sub_dim:
            raise DataError("rotation size does not match D * sub_dim")
        gram = r.T @ r
        dev = np.abs(gram - np.eye(r.shape[0])).max()
        if dev > ROTATION_TOL:
            raise DataError(f"rotation is not orthogonal (max deviation {dev:.3g})")
        if not np.all(np.isfinite(self.centroids)):
            raise DataError("centroids contain NaN or Inf")
        return self


@dataclass
class CodeStats:
    """Distribution diagnostics of an item-code table."""

    histograms: np.ndarray    # (D, M) counts per index per dimension
    entropy_bits: np.ndarray  # (D,) Shannon entropy of each dimension
    collision_count: int      # pairs of items sharing their full code
    collision_rate: float     # fraction of items sharing a code with another
    num_items: int


def kmeans(points, n_clusters, max_iters=100, seed=0, init_centroids=None):
    """Lloyd's algorithm with k-means++ init and farthest-point repair.

    Ties in the assignment go to the lowest centroid index. Empty clusters
    are re-seeded with the point currently farthest from its centroid. Stops
    when the assignment is unchanged or after max_iters updates. Deterministic
    for a given seed; `init_centroids` skips the k-means++ stage (used for
    warm starts during OPQ training).
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < n_clusters:
        raise DataError(f"need at least {n_clusters} points, got {n}")
    if max_iters < 1:
        raise ConfigError("max_iters must be at least 1")

    rng = np.random.default_rng(seed)
    if init_centroids is None:
        centroids = _kmeans_pp(points, n_clusters, rng)
    else:
        centroids = np.ascontiguousarray(init_centroids, dtype=np.float64).copy()
        if centroids.shape != (n_clusters, points.shape[1]):
            raise ConfigError("init_centroids shape mismatch")

    history = []
    prev = None
    codes = None
    d2 = None
    for _ in range(max_iters):
        codes, d2 = kernels.assign_nearest(points, centroids)
        history.append(float(d2.sum()))
        if prev is not None and np.array_equal(codes, prev):
            break
        prev = codes
        means, counts = kernels.update_means(points, codes, n_clusters)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            _repair_empty(points, d2, means, empty)
        centroids = means
    else:
        # max_iters exhausted: realign the assignment with the last update.
        codes, d2 = kernels.assign_nearest(points, centroids)
        history.append(float(d2.sum()))
    return KMeansResult(centroids, codes, history[-1], history)


def _kmeans_pp(points, n_clusters, rng):
    n = points.shape[0]
    centroids = np.empty((n_clusters, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    closest = ((points - centroids[0]) ** 2).sum(axis=1)
    for k in range(1, n_clusters):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)
        centroids[k] = points[idx]
        np.minimum(closest, ((points - centroids[k]) ** 2).sum(axis=1),
                   out=closest)
    return centroids


def _repair_empty(points, d2, means, empty):
    order = np.argsort(-d2, kind="stable")
    cursor = 0
    for cluster in empty:
        means[cluster] = points[order[cursor]]
        cursor += 1


def train_opq(embeddings, num_centroids, num_subspaces, outer_iters=20,
              seed=0, kmeans_iters=100):
    """Learn an OPQ codebook from an embedding matrix.

    Alternates per-sub-space k-means on the rotated data with an orthogonal
    Procrustes update of the rotation (SVD of the cross-covariance between
    the data and its quantized reconstruction). K-means is warm-started from
    the previous centroids, so the total quantization error is non-increasing
    across outer iterations; outer_iters=0 yields plain PQ with the identity
    rotation.
    """
    x = np.ascontiguousarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise DataError("embedding matrix must be 2-d")
    n, d_w = x.shape
    if d_w % num_subspaces != 0:
        raise ConfigError(
            f"embedding dim {d_w} is not divisible by D={num_subspaces}")
    if n < num_centroids:
        raise DataError(f"need at least {num_centroids} items, got {n}")
    if outer_iters < 0:
        raise ConfigError("outer_iters must be non-negative")
    sub = d_w // num_subspaces

    rotation = np.eye(d_w)
    rotated = x
    results = [
        kmeans(rotated[:, k * sub:(k + 1) * sub], num_centroids,
               max_iters=kmeans_iters,
               seed=np.random.SeedSequence(entropy=seed, spawn_key=(k,)))
        for k in range(num_subspaces)
    ]
    for _ in range(outer_iters):
        recon = _reconstruct(results, n, d_w, sub)
        u, _, vt = np.linalg.svd(x.T @ recon)
        rotation = u @ vt
        rotated = x @ rotation
        results = [
            kmeans(rotated[:, k * sub:(k + 1) * sub], num_centroids,
                   max_iters=kmeans_iters, init_centroids=results[k].centroids)
            for k in range(num_subspaces)
        ]
    centroids = np.stack([r.centroids for r in results])
    return OpqCodebook(rotation, centroids).validate()


def _reconstruct(results, n, d_w, sub):
    recon = np.empty((n, d_w))
    for k, res in enumerate(results):
        recon[:, k * sub:(k + 1) * sub] = res.centroids[res.assignments]
    return recon


def encode(codebook, x):
    """Quantize one embedding into its length-D item code."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (codebook.embed_dim,):
        raise ValueError(
            f"expected a vector of dim {codebook.embed_dim}, got {x.shape}")
    return encode_all(codebook, x[None, :])[0]


def encode_all(codebook, embeddings):
    """Quantize a matrix of embeddings into an (N, D) item-code table."""
    x = np.ascontiguousarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != codebook.embed_dim:
        raise ValueError(
            f"expected (N, {codebook.embed_dim}) embeddings, got {x.shape}")
    rotated = x @ codebook.rotation
    sub = codebook.sub_dim
    codes = np.empty((x.shape[0], codebook.num_subspaces), dtype=np.int64)
    for k in range(codebook.num_subspaces):
        block = np.ascontiguousarray(rotated[:, k * sub:(k + 1) * sub])
        codes[:, k], _ = kernels.assign_nearest(block, codebook.centroids[k])
    return codes


def reconstruction_error(codebook, embeddings):
    """Mean squared quantization error in the rotated space."""
    x = np.ascontiguousarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != codebook.embed_dim:
        raise ValueError(
            f"expected (N, {codebook.embed_dim}) embeddings, got {x.shape}")
    rotated = x @ codebook.rotation
    codes = encode_all(codebook, x)
    sub = codebook.sub_dim
    err = 0.0
    for k in range(codebook.num_subspaces):
        picked = codebook.centroids[k][codes[:, k]]
        err += ((rotated[:, k * sub:(k + 1) * sub] - picked) ** 2).sum()
    return err / x.shape[0]


def code_stats(code_table, num_centroids):
    """Histograms, per-dimension entropy and full-code collision counts."""
    codes = np.asarray(code_table, dtype=np.int64)
    if codes.ndim != 2 or codes.shape[0] == 0:
        raise DataError("code table must be a non-empty (N, D) matrix")
    n, d = codes.shape
    hist = np.stack([np.bincount(codes[:, k], minlength=num_centroids)
                     for k in range(d)])
    probs = hist / n
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log2(probs), 0.0)
    entropy = -terms.sum(axis=1)

    _, counts = np.unique(codes, axis=0, return_counts=True)
    collisions = int((counts * (counts - 1) // 2).sum())
    colliding_items = int(counts[counts > 1].sum())
    return CodeStats(hist, entropy, collisions, colliding_items / n, n)
