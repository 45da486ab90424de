"""Full-ranking evaluation under the leave-one-out protocol.

Every test target is ranked against the whole item catalog by cosine
similarity between the encoded context and each item representation. Ties
are broken pessimistically (the target is placed after every equal-scored
item). Reports carry Recall@K and NDCG@K means plus an optional breakdown
by the target's training popularity.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from .corpus import train_popularity
from .errors import DataError

EVAL_BATCH = 256


@dataclass
class ScoringModel:
    """Frozen encoder plus one representation row per catalog item."""

    encoder: enc.SequenceEncoderParams
    item_reps: np.ndarray  # (num_items, d_v), unnormalized

    @property
    def num_items(self):
        return self.item_reps.shape[0]

    def normalized_items(self):
        norms = np.linalg.norm(self.item_reps, axis=1, keepdims=True)
        safe = np.where(norms == 0, 1.0, norms)
        return self.item_reps / safe

    def sequence_reps(self, contexts, lengths):
        """Encode padded (B, n) item-id contexts into (B, d_v) raw outputs."""
        reps = self.item_reps[contexts]
        reps[lengths[:, None] <= np.arange(contexts.shape[1])] = 0.0
        y, _ = enc.forward_batch(self.encoder, reps, lengths)
        return y

    def score_all(self, context_items):
        """Cosine scores of every catalog item given one context."""
        ctx = np.asarray(context_items, dtype=np.int64)
        ctx = ctx[-self.encoder.n_max:]
        y = self.sequence_reps(ctx[None, :], np.asarray([len(ctx)]))[0]
        y_norm = np.linalg.norm(y)
        if y_norm == 0:
            raise DataError("context encoded to a zero vector")
        return self.normalized_items() @ (y / y_norm)


@dataclass
class EvalReport:
    metrics: dict
    user_count: int
    buckets: list = field(default_factory=list)  # (label, count, metrics)
    wall_clock: float = 0.0


def rank_from_scores(scores, target):
    """1-based rank of the target, pessimistic under ties."""
    scores = np.asarray(scores)
    if scores.ndim != 1 or scores.size == 0:
        raise DataError("need a non-empty score vector")
    if not 0 <= target < scores.size:
        raise IndexError(f"target {target} outside [0, {scores.size})")
    return int((scores >= scores[target]).sum())


def rank_target(model, context_items, target):
    """Rank of the target among all catalog items for one context."""
    if len(context_items) == 0:
        raise DataError("context must be non-empty")
    return rank_from_scores(model.score_all(context_items), target)


def recall_at_k(rank, k):
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank, k):
    """Single-ground-truth NDCG: 1/log2(rank+1) inside the window, else 0."""
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def _instances(split, which):
    if which == "test":
        return [(si, split.test_context(si), split.test_target(si))
                for si in range(len(split.sequences))]
    if which == "valid":
        return [(si, split.valid_context(si), split.valid_target(si))
                for si in range(len(split.sequences))]
    raise ValueError(f"unknown split {which!r}")


def ranks_for_split(model, split, which="test", user_subset=None,
                    exclude_context=False):
    """Target ranks for every evaluated instance; batched over users."""
    instances = _instances(split, which)
    if user_subset is not None:
        instances = [instances[i] for i in user_subset]
    if not instances:
        raise DataError("nothing to evaluate: empty split")
    items_norm = model.normalized_items()
    n_cap = model.encoder.n_max
    ranks = np.empty(len(instances), dtype=np.int64)
    for start in range(0, len(instances), EVAL_BATCH):
        chunk = instances[start:start + EVAL_BATCH]
        lengths = np.asarray([min(len(ctx), n_cap) for _, ctx, _ in chunk],
                             dtype=np.int64)
        width = int(lengths.max())
        padded = np.zeros((len(chunk), width), dtype=np.int64)
        for row, (_, ctx, _) in enumerate(chunk):
            tail = ctx[-n_cap:]
            padded[row, :len(tail)] = tail
        y = model.sequence_reps(padded, lengths)
        norms = np.linalg.norm(y, axis=1, keepdims=True)
        norms = np.where(norms == 0, 1.0, norms)
        scores = (y / norms) @ items_norm.T
        if exclude_context:
            for row, (_, ctx, tgt) in enumerate(chunk):
                masked = np.setdiff1d(np.asarray(ctx), [tgt])
                scores[row, masked] = -np.inf
        targets = np.asarray([tgt for _, _, tgt in chunk])
        hit = scores[np.arange(len(chunk)), targets]
        ranks[start:start + len(chunk)] = (scores >= hit[:, None]).sum(axis=1)
    return ranks, instances


def _metric_means(ranks, ks):
    out = {}
    for k in ks:
        out[f"recall@{k}"] = float(np.mean([recall_at_k(r, k) for r in ranks]))
        out[f"ndcg@{k}"] = float(np.mean([ndcg_at_k(r, k) for r in ranks]))
    return out


def evaluate(model, split, ks=(10, 50), bucket_edges=None, which="test",
             user_subset=None, exclude_context=False):
    """Mean Recall@K / NDCG@K over users, optionally split by popularity."""
    started = time.perf_counter()
    ranks, instances = ranks_for_split(model, split, which=which,
                                       user_subset=user_subset,
                                       exclude_context=exclude_context)
    metrics = _metric_means(ranks, ks)
    buckets = []
    if bucket_edges is not None and len(bucket_edges) > 0:
        pop = train_popularity(split)
        edges = list(bucket_edges) + [None]
        targets = np.asarray([tgt for _, _, tgt in instances])
        for lo, hi in zip(edges[:-1], edges[1:]):
            if hi is None:
                mask = pop[targets] >= lo
                label = f"[{lo},inf)"
            else:
                mask = (pop[targets] >= lo) & (pop[targets] < hi)
                label = f"[{lo},{hi})"
            chunk = ranks[mask]
            buckets.append((label, int(mask.sum()),
                            _metric_means(chunk, ks) if len(chunk) else {}))
    return EvalReport(metrics, len(ranks), buckets,
                      time.perf_counter() - started)


def format_report(report):
    """Human-readable table."""
    lines = [f"users evaluated: {report.user_count}"]
    width = max(len(k) for k in report.metrics)
    for key in sorted(report.metrics):
        lines.append(f"  {key:<{width}}  {report.metrics[key]:.4f}")
    for label, count, metrics in report.buckets:
        lines.append(f"popularity {label}: {count} users")
        for key in sorted(metrics):
            lines.append(f"  {key:<{width}}  {metrics[key]:.4f}")
    lines.append(f"wall clock: {report.wall_clock:.2f}s")
    return "\n".join(lines)


def report_to_kv(report):
    """Machine-readable key=value lines."""
    lines = [f"users={report.user_count}"]
    for key in sorted(report.metrics):
        lines.append(f"{key}={report.metrics[key]:.10f}")
    for b, (label, count, metrics) in enumerate(report.buckets):
        lines.append(f"bucket.{b}.range={label}")
        lines.append(f"bucket.{b}.users={count}")
        for key in sorted(metrics):
            lines.append(f"bucket.{b}.{key}={metrics[key]:.10f}")
    lines.append(f"wall_clock={report.wall_clock:.6f}")
    return "\n".join(lines)
