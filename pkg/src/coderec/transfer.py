"""Cross-domain transfer: permutation alignment then table fine-tuning.

Stage 1 relearns which pre-trained embedding row each downstream code index
selects: per code dimension a learnable square matrix is relaxed into a
doubly stochastic matrix by the Gumbel-Sinkhorn operator and trained with
the next-item objective while everything else stays frozen. Stage 2 fixes
the alignment, materializes the permuted table, and fine-tunes only that
table. The encoder (position embeddings included) never changes after
pre-training; gradients still flow through it to the item representations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import encoder as enc
from . import itemrep
from .checkpoint import Checkpoint, params_digest
from .errors import ConfigError, DataError
from .evaluation import ScoringModel, ndcg_at_k, ranks_for_split
from .optim import Adam
from .quantizer import encode_all


@dataclass
class AlignmentMatrices:
    """Learnable per-dimension alignment logits and their relaxation knobs."""

    theta: np.ndarray           # (D, M, M)
    sinkhorn_temp: float = 0.1
    sinkhorn_iters: int = 3
    gumbel_noise_scale: float = 0.1

    @property
    def num_subspaces(self):
        return self.theta.shape[0]

    @property
    def num_centroids(self):
        return self.theta.shape[1]

    def relaxed(self, rng=None, noise_scale=None):
        """Doubly-stochastic-approximant stack (D, M, M)."""
        scale = self.gumbel_noise_scale if noise_scale is None else noise_scale
        return np.stack([
            gumbel_sinkhorn(self.theta[k], self.sinkhorn_temp,
                            self.sinkhorn_iters, scale, rng)
            for k in range(self.num_subspaces)])


THETA_INIT_STD = 0.1


def init_alignment(num_subspaces, num_centroids, seed, sinkhorn_temp=0.1,
                   sinkhorn_iters=3, gumbel_noise_scale=0.1):
    rng = np.random.default_rng(seed)
    theta = rng.normal(0.0, THETA_INIT_STD,
                       size=(num_subspaces, num_centroids, num_centroids))
    return AlignmentMatrices(theta, sinkhorn_temp, sinkhorn_iters,
                             gumbel_noise_scale)


def gumbel_sinkhorn(theta, temp, iters, noise_scale=0.0, rng=None,
                    with_cache=False):
    """Relax logits into a near-doubly-stochastic matrix.

    Adds Gumbel(0, noise_scale) noise, divides by temp, exponentiates, then
    alternates column and row normalization `iters` times, so every row sums
    to 1 exactly after the final (row-wise) step and column sums converge to
    1 as iters grows. All entries stay strictly positive. With
    with_cache=True also returns the cache consumed by
    gumbel_sinkhorn_backward, whose gradients w.r.t. theta are exact.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 2 or theta.shape[0] != theta.shape[1]:
        raise ValueError("theta must be a square matrix")
    if not np.all(np.isfinite(theta)):
        raise DataError("theta contains NaN or Inf")
    if temp <= 0:
        raise ConfigError("sinkhorn temperature must be positive")
    if iters < 1:
        raise ConfigError("sinkhorn iteration count must be at least 1")
    if noise_scale < 0:
        raise ConfigError("gumbel noise scale must be non-negative")

    z = theta
    if noise_scale > 0:
        if rng is None:
            raise ValueError("noise_scale > 0 requires an rng")
        u = rng.random(theta.shape)
        z = theta + noise_scale * -np.log(-np.log(u))
    z = z / temp
    # The operator is invariant to a global additive shift of z, so the
    # stabilizing max-subtraction does not change the value or the gradient.
    s0 = np.exp(z - z.max())
    s = s0
    steps = []
    for _ in range(iters):
        csum = s.sum(axis=0, keepdims=True)
        s = s / csum
        steps.append((0, s, csum))
        rsum = s.sum(axis=1, keepdims=True)
        s = s / rsum
        steps.append((1, s, rsum))
    if with_cache:
        return s, (s0, temp, steps)
    return s


def gumbel_sinkhorn_backward(cache, d_pi):
    """Exact d(loss)/d(theta) given d(loss)/d(pi)."""
    s0, temp, steps = cache
    ds = np.asarray(d_pi, dtype=np.float64)
    for axis, after, sums in reversed(steps):
        inner = (ds * after).sum(axis=axis, keepdims=True)
        ds = (ds - inner) / sums
    return ds * s0 / temp


def harden_permutation(pi):
    """Greedy row-argmax assignment to a hard permutation matrix."""
    pi = np.asarray(pi)
    m = pi.shape[0]
    hard = np.zeros_like(pi)
    taken = np.zeros(m, dtype=bool)
    for row in range(m):
        masked = np.where(taken, -np.inf, pi[row])
        col = int(np.argmax(masked))
        hard[row, col] = 1.0
        taken[col] = True
    return hard


# ---------------------------------------------------------------------------
# Next-item objective
# ---------------------------------------------------------------------------

def next_item_loss(seq_rep, target, all_item_reps, tau):
    """Cross-entropy of the softmax over temperature-scaled cosine scores.

    Returns (loss, (d_seq_rep, d_all_item_reps)) with exact gradients through
    the cosine normalization of both sides.
    """
    s = np.asarray(seq_rep, dtype=np.float64)
    if s.ndim != 1:
        raise ValueError("seq_rep must be a vector")
    loss, d_s, d_v = next_item_loss_batch(s[None, :], np.asarray([target]),
                                          all_item_reps, tau)
    return loss, (d_s[0], d_v)


def next_item_loss_batch(seq_reps, targets, all_item_reps, tau):
    """Mean next-item loss over a batch; gradients to raw inputs."""
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    s = np.asarray(seq_reps, dtype=np.float64)
    v = np.asarray(all_item_reps, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if not np.all(np.isfinite(s)) or not np.all(np.isfinite(v)):
        raise DataError("representations contain NaN or Inf")
    n = v.shape[0]
    if targets.min() < 0 or targets.max() >= n:
        raise IndexError(f"target outside [0, {n})")
    b = s.shape[0]

    s_norms = np.linalg.norm(s, axis=1, keepdims=True)
    v_norms = np.linalg.norm(v, axis=1, keepdims=True)
    if np.any(s_norms == 0) or np.any(v_norms == 0):
        raise DataError("cannot score a zero-norm representation")
    u = s / s_norms
    w = v / v_norms

    logits = (u @ w.T) / tau
    mx = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - mx)
    z = ex.sum(axis=1, keepdims=True)
    lse = (mx + np.log(z))[:, 0]
    loss = float((lse - logits[np.arange(b), targets]).mean())

    d_logits = ex / z
    d_logits[np.arange(b), targets] -= 1.0
    d_logits /= b * tau
    d_u = d_logits @ w
    d_w = d_logits.T @ u
    d_s = itemrep.normalize_rows_backward(s, s_norms, d_u)
    d_v = itemrep.normalize_rows_backward(v, v_norms, d_w)
    return loss, d_s, d_v


# ---------------------------------------------------------------------------
# Fine-tuning configuration and stages
# ---------------------------------------------------------------------------

@dataclass
class FinetuneConfig:
    align_epochs: int = 3
    table_epochs: int = 5
    align_lr: float = 0.03
    table_lr: float = 0.001
    batch_size: int = 256
    tau: float = 0.07
    sinkhorn_temp: float = 0.1
    sinkhorn_iters: int = 3
    gumbel_noise: float = 0.1
    seed: int = 0
    valid_users_cap: int = 2000
    harden: bool = False
    skip_alignment: bool = False
    random_code: bool = False
    reuse_pretrain_codebook: bool = False
    no_pretrain: bool = False

    def validate(self):
        if self.align_epochs < 0 or self.table_epochs < 0:
            raise ConfigError("stage epochs must be non-negative")
        if self.align_lr <= 0 or self.table_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch size must be positive")
        if self.tau <= 0:
            raise ConfigError("temperature must be positive")
        if self.sinkhorn_temp <= 0 or self.sinkhorn_iters < 1:
            raise ConfigError("invalid sinkhorn settings")
        if self.gumbel_noise < 0:
            raise ConfigError("gumbel noise scale must be non-negative")
        if self.valid_users_cap < 1:
            raise ConfigError("valid_users_cap must be positive")
        if self.random_code and self.reuse_pretrain_codebook:
            raise ConfigError(
                "random_code and reuse_pretrain_codebook are mutually exclusive")
        return self


def _check_compatible(ckpt, codebook, codes, split):
    d, m, _ = ckpt.table.shape
    if codebook.num_subspaces != d or codebook.num_centroids != m:
        raise ConfigError(
            f"downstream codebook (D={codebook.num_subspaces}, "
            f"M={codebook.num_centroids}) does not match the checkpoint "
            f"(D={d}, M={m})")
    if codes.shape != (split.num_items, d):
        raise ConfigError("item codes shape does not match corpus/codebook")


def _epoch_batches(split, batch_size, n_max, rng):
    order = rng.permutation(split.num_train_instances)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        rows = split.train_instances[idx]
        lengths = np.minimum(rows[:, 1], n_max)
        width = int(lengths.max())
        item_ids = np.zeros((len(idx), width), dtype=np.int64)
        positives = np.empty(len(idx), dtype=np.int64)
        for b, (si, end) in enumerate(rows):
            train = split.train_items(si)
            ctx = train[max(0, end - n_max):end]
            item_ids[b, :len(ctx)] = ctx
            positives[b] = train[end]
        yield item_ids, lengths.astype(np.int64), positives


def _valid_subset(split, cap, seed_seq):
    n_users = len(split.sequences)
    size = min(cap, n_users)
    return np.sort(np.random.default_rng(seed_seq).choice(
        n_users, size=size, replace=False))


def _validation_ndcg(enc_params, all_reps, split, subset, k=10):
    model = ScoringModel(enc_params, all_reps)
    ranks, _ = ranks_for_split(model, split, which="valid", user_subset=subset)
    return float(np.mean([ndcg_at_k(r, k) for r in ranks]))


def _forward_instances(enc_params, all_reps, item_ids, lengths):
    reps = all_reps[item_ids]
    reps[lengths[:, None] <= np.arange(item_ids.shape[1])] = 0.0
    return enc.forward_batch(enc_params, reps, lengths)


def _backprop_to_items(enc_params, cache, d_y, d_all, item_ids, lengths):
    _, d_reps = enc.backward_batch(enc_params, cache, d_y)
    mask = lengths[:, None] > np.arange(item_ids.shape[1])
    np.add.at(d_all, item_ids[mask], d_reps[mask])


def align_stage(ckpt, split, codebook, codes, cfg, log=None):
    """Learn the code-embedding alignment; only theta changes.

    Keeps the theta snapshot with the best validation NDCG@10, which is
    evaluated before the first epoch as well, so align_epochs=0 returns the
    initialization untouched.
    """
    cfg.validate()
    _check_compatible(ckpt, codebook, codes, split)
    d, m, _ = ckpt.table.shape
    root = np.random.SeedSequence(cfg.seed)
    theta_seed, loop_seed, valid_seed = root.spawn(3)
    align = init_alignment(d, m, theta_seed, cfg.sinkhorn_temp,
                           cfg.sinkhorn_iters, cfg.gumbel_noise)
    rng = np.random.default_rng(loop_seed)
    subset = _valid_subset(split, cfg.valid_users_cap, valid_seed)
    table = ckpt.table
    enc_params = ckpt.encoder
    opt = Adam(cfg.align_lr)
    params = {"theta": align.theta}

    def current_reps(noise_scale, rng_=None):
        pi = align.relaxed(rng_, noise_scale=noise_scale)
        aligned = itemrep.materialize_aligned_table(table, pi)
        return itemrep.item_reps(aligned, codes)

    best_val = _validation_ndcg(enc_params, current_reps(0.0), split, subset)
    best_theta = align.theta.copy()
    if log is not None:
        log.append(f"stage=align epoch=0 val_ndcg10={best_val:.6f}")

    for epoch in range(1, cfg.align_epochs + 1):
        epoch_loss = 0.0
        n_batches = 0
        for item_ids, lengths, positives in _epoch_batches(
                split, cfg.batch_size, enc_params.n_max, rng):
            pis = []
            caches = []
            for k in range(d):
                pi_k, cache_k = gumbel_sinkhorn(
                    align.theta[k], cfg.sinkhorn_temp, cfg.sinkhorn_iters,
                    cfg.gumbel_noise, rng, with_cache=True)
                pis.append(pi_k)
                caches.append(cache_k)
            aligned = itemrep.materialize_aligned_table(table, np.stack(pis))
            all_reps = itemrep.item_reps(aligned, codes)

            y, cache = _forward_instances(enc_params, all_reps, item_ids,
                                          lengths)
            loss, d_y, d_all = next_item_loss_batch(y, positives, all_reps,
                                                    cfg.tau)
            if not np.isfinite(loss):
                raise DataError(f"alignment diverged at epoch {epoch}")
            epoch_loss += loss
            n_batches += 1
            _backprop_to_items(enc_params, cache, d_y, d_all, item_ids,
                               lengths)

            d_theta = np.empty_like(align.theta)
            for k in range(d):
                d_aligned_k = np.zeros_like(aligned[k])
                np.add.at(d_aligned_k, codes[:, k], d_all / d)
                d_pi_k = d_aligned_k @ table[k].T
                d_theta[k] = gumbel_sinkhorn_backward(caches[k], d_pi_k)
            opt.step(params, {"theta": d_theta})

        val = _validation_ndcg(enc_params, current_reps(0.0), split, subset)
        if log is not None:
            mean_loss = epoch_loss / max(n_batches, 1)
            log.append(f"stage=align epoch={epoch} loss={mean_loss:.6f} "
                       f"val_ndcg10={val:.6f}")
        if val > best_val:
            best_val = val
            best_theta = align.theta.copy()

    return replace(align, theta=best_theta)


def finetune_stage(ckpt, alignment, split, codebook, codes, cfg,
                   config_text="", log=None):
    """Fine-tune the aligned code embedding table; the encoder stays frozen.

    The alignment (noise disabled) is materialized into the table once,
    optionally hardened to a true permutation, and only the materialized
    table is optimized afterwards. Returns the downstream checkpoint with
    the best-validation table and the provenance digest of its source.
    """
    cfg.validate()
    _check_compatible(ckpt, codebook, codes, split)
    d = ckpt.table.shape[0]
    if alignment is None:
        aligned = ckpt.table.copy()
    else:
        pi = alignment.relaxed(noise_scale=0.0)
        if cfg.harden:
            pi = np.stack([harden_permutation(pi[k]) for k in range(d)])
        aligned = itemrep.materialize_aligned_table(ckpt.table, pi)

    root = np.random.SeedSequence([cfg.seed, 1])
    loop_seed, valid_seed = root.spawn(2)
    rng = np.random.default_rng(loop_seed)
    subset = _valid_subset(split, cfg.valid_users_cap, valid_seed)
    enc_params = ckpt.encoder
    opt = Adam(cfg.table_lr)
    params = {"table": aligned}

    def val_now():
        return _validation_ndcg(enc_params, itemrep.item_reps(aligned, codes),
                                split, subset)

    best_val = val_now()
    best_table = aligned.copy()
    if log is not None:
        log.append(f"stage=finetune epoch=0 val_ndcg10={best_val:.6f}")

    for epoch in range(1, cfg.table_epochs + 1):
        epoch_loss = 0.0
        n_batches = 0
        for item_ids, lengths, positives in _epoch_batches(
                split, cfg.batch_size, enc_params.n_max, rng):
            all_reps = itemrep.item_reps(aligned, codes)
            y, cache = _forward_instances(enc_params, all_reps, item_ids,
                                          lengths)
            loss, d_y, d_all = next_item_loss_batch(y, positives, all_reps,
                                                    cfg.tau)
            if not np.isfinite(loss):
                raise DataError(f"fine-tuning diverged at epoch {epoch}")
            epoch_loss += loss
            n_batches += 1
            _backprop_to_items(enc_params, cache, d_y, d_all, item_ids,
                               lengths)
            table_grad = np.zeros_like(aligned)
            itemrep.scatter_rep_grad(table_grad, codes, d_all)
            opt.step(params, {"table": table_grad})

        val = val_now()
        if log is not None:
            mean_loss = epoch_loss / max(n_batches, 1)
            log.append(f"stage=finetune epoch={epoch} loss={mean_loss:.6f} "
                       f"val_ndcg10={val:.6f}")
        if val > best_val:
            best_val = val
            best_table = aligned.copy()

    return Checkpoint(
        config_text=config_text,
        codebook=codebook,
        table=best_table,
        encoder=ckpt.encoder.copy(),
        optimizer_arrays=None,
        log=list(log) if log else [],
        item_codes=codes,
        provenance=params_digest(ckpt.table, ckpt.encoder),
    )


def permute_item_codes(codes, rng):
    """Reassign item -> code by a random permutation of the code rows."""
    perm = rng.permutation(codes.shape[0])
    return codes[perm]


def inductive_extend(ckpt, new_embeddings):
    """Score new items without touching any parameter.

    New embeddings are encoded with the checkpoint's codebook and looked up
    in its fine-tuned table; returns (codes, reps) for the extended catalog
    where rows [0, N_base) are the checkpoint's own items.
    """
    if ckpt.item_codes is None:
        raise DataError("checkpoint carries no item codes to extend")
    new_embeddings = np.asarray(new_embeddings, dtype=np.float64)
    if new_embeddings.ndim != 2:
        raise ValueError("new_embeddings must be a 2-d matrix")
    if new_embeddings.shape[1] != ckpt.codebook.embed_dim:
        raise ValueError(
            f"embedding dim {new_embeddings.shape[1]} does not match the "
            f"codebook dim {ckpt.codebook.embed_dim}")
    if new_embeddings.shape[0]:
        new_codes = encode_all(ckpt.codebook, new_embeddings)
        codes = np.concatenate([ckpt.item_codes, new_codes], axis=0)
    else:
        codes = ckpt.item_codes.copy()
    reps = itemrep.item_reps(ckpt.table, codes)
    return codes, reps
