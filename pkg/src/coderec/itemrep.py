"""Item representations derived from discrete codes.

The code embedding table holds D matrices of shape (M, d_v); an item's
representation is the mean of the D rows selected by its code. Lookup is
D row reads plus one average, no matrix multiplication. Semi-synthetic
codes corrupt a true code index-wise for use as contrastive hard negatives,
and alignment-aware lookup routes each index through a (soft) permutation
of the table rows.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DataError

INIT_STD = 0.02


def init_table(num_subspaces, num_centroids, rep_dim, seed, dtype=np.float64):
    """Gaussian-initialized code embedding table of shape (D, M, d_v)."""
    if num_subspaces < 1 or num_centroids < 1 or rep_dim < 1:
        raise ConfigError("table dimensions must be positive")
    rng = np.random.default_rng(seed)
    table = rng.normal(0.0, INIT_STD,
                       size=(num_subspaces, num_centroids, rep_dim))
    return table.astype(dtype, copy=False)


def _check_code(table, code):
    code = np.asarray(code, dtype=np.int64)
    d, m, _ = table.shape
    if code.shape != (d,):
        raise IndexError(f"code must have {d} indices, got shape {code.shape}")
    if code.min() < 0 or code.max() >= m:
        raise IndexError(f"code index outside [0, {m}): {code}")
    return code


def item_rep(table, code):
    """Mean of the D table rows selected by the code."""
    code = _check_code(table, code)
    d = table.shape[0]
    return table[np.arange(d), code].mean(axis=0)


def item_reps(table, codes):
    """Vectorized item_rep over an (N, D) code table; returns (N, d_v)."""
    codes = np.asarray(codes, dtype=np.int64)
    d, m, rep_dim = table.shape
    if codes.ndim != 2 or codes.shape[1] != d:
        raise IndexError(f"expected (N, {d}) codes, got {codes.shape}")
    if codes.size and (codes.min() < 0 or codes.max() >= m):
        raise IndexError(f"code index outside [0, {m})")
    out = np.zeros((codes.shape[0], rep_dim), dtype=table.dtype)
    for k in range(d):
        out += table[k][codes[:, k]]
    return out / d


def scatter_rep_grad(grad_table, codes, rep_grads):
    """Accumulate d(loss)/d(table) for reps produced by item_reps.

    Each looked-up row receives rep_grad / D, mirroring the mean pooling.
    Implemented as a one-hot matmul, which beats np.add.at by an order of
    magnitude at training batch sizes.
    """
    codes = np.asarray(codes, dtype=np.int64)
    d, m, _ = grad_table.shape
    scaled = np.asarray(rep_grads) / d
    n = codes.shape[0]
    onehot = np.zeros((m, n), dtype=grad_table.dtype)
    rows = np.arange(n)
    for k in range(d):
        onehot[:] = 0.0
        onehot[codes[:, k], rows] = 1.0
        grad_table[k] += onehot @ scaled


def semi_synthetic(code, rho, num_centroids, rng):
    """Corrupt a code by resampling each index uniformly with probability rho.

    Resampling draws from the full index set, so the original index can
    reappear; rho=0 returns the code unchanged.
    """
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"rho must be in [0, 1], got {rho}")
    code = np.asarray(code, dtype=np.int64)
    flip = rng.random(code.shape) < rho
    draws = rng.integers(0, num_centroids, size=code.shape)
    return np.where(flip, draws, code)


def semi_synthetic_rep(table, code, rho, rng):
    """Representation of a semi-synthetic hard negative."""
    corrupted = semi_synthetic(code, rho, table.shape[1], rng)
    return item_rep(table, corrupted)


def check_alignment_shape(table, pi):
    d, m, _ = table.shape
    pi = np.asarray(pi)
    if pi.shape != (d, m, m):
        raise ValueError(
            f"alignment must have shape ({d}, {m}, {m}), got {pi.shape}")
    return pi


def aligned_item_rep(table, pi, code):
    """Mean of permutation-aligned rows: (1/D) sum_k (Pi_k @ E_k)[c_k].

    Computed as a Pi-row-weighted combination of table rows; the aligned
    table is never materialized here.
    """
    pi = check_alignment_shape(table, pi)
    code = _check_code(table, code)
    d = table.shape[0]
    out = np.zeros(table.shape[2], dtype=table.dtype)
    for k in range(d):
        out += pi[k, code[k]] @ table[k]
    return out / d


def materialize_aligned_table(table, pi):
    """Dense aligned table (Pi_k @ E_k for every k), for bulk lookups."""
    pi = check_alignment_shape(table, pi)
    return np.einsum("kij,kjd->kid", pi, table)


def normalize_rows(x):
    """L2-normalize rows; raises on a zero row."""
    x = np.asarray(x)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DataError("cannot L2-normalize a zero vector")
    return x / norms


def normalize_rows_backward(x, norms, grad_normed):
    """Backprop through y = x / ||x|| given the unnormalized x and norms."""
    y = x / norms
    inner = (grad_normed * y).sum(axis=-1, keepdims=True)
    return (grad_normed - inner * y) / norms
