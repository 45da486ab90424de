"""Multi-domain contrastive pre-training.

Each step samples a mixed-domain batch of (context, next item) pairs, builds
item representations by code lookup, encodes the contexts, and contrasts
every L2-normalized sequence representation against its positive with the
other in-batch positives plus one semi-synthetic corrupted code as negatives.
Only the code embedding table and the encoder receive gradients; the
quantizer and the raw text embeddings stay fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from . import itemrep
from .checkpoint import Checkpoint
from .corpus import sample_batch
from .errors import ConfigError, DataError
from .evaluation import ScoringModel, ndcg_at_k, ranks_for_split
from .optim import Adam

NORM_TOL = 1e-3


@dataclass
class PretrainConfig:
    batch_size: int = 256
    tau: float = 0.07
    rho: float = 0.75
    lr: float = 1e-3
    max_epochs: int = 30
    patience: int = 10
    steps_per_epoch: int = 100
    seed: int = 0
    disable_semi_synthetic: bool = False
    dropout: float = 0.0
    valid_users_cap: int = 2000

    def validate(self):
        if self.batch_size < 2:
            raise ConfigError("in-batch negatives need batch_size >= 2")
        if self.tau <= 0:
            raise ConfigError("temperature must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("semi-synthetic ratio must be in [0, 1]")
        if self.max_epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigError("epochs and steps_per_epoch must be positive")
        if self.patience < 0:
            raise ConfigError("patience must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        return self


def contrastive_loss(seq_reps, pos_reps, semi_reps, tau):
    """InfoNCE-style loss over normalized reps, with exact input gradients.

    Per instance j the positive score s_j . v_j competes against all B
    in-batch scores (the positive included) plus the semi-synthetic score
    s_j . sv_j. All rows must arrive L2-normalized; pass semi_reps=None to
    drop the semi-synthetic term (ablation). Returns
    (loss, (d_seq, d_pos, d_semi)); d_semi is None when semi_reps is None.
    Computed with max-subtracted log-sum-exp, so the loss is finite for any
    finite input.
    """
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    s = np.asarray(seq_reps, dtype=np.float64)
    v = np.asarray(pos_reps, dtype=np.float64)
    if s.ndim != 2 or s.shape != v.shape:
        raise ValueError("seq_reps and pos_reps must both be (B, d)")
    _check_normalized("seq_reps", s)
    _check_normalized("pos_reps", v)
    b = s.shape[0]

    in_logits = (s @ v.T) / tau                      # (B, B)
    if semi_reps is not None:
        sv = np.asarray(semi_reps, dtype=np.float64)
        if sv.shape != s.shape:
            raise ValueError("semi_reps must match seq_reps shape")
        _check_normalized("semi_reps", sv)
        semi_logits = (s * sv).sum(axis=1) / tau     # (B,)
        stacked = np.concatenate([semi_logits[:, None], in_logits], axis=1)
    else:
        stacked = in_logits

    mx = stacked.max(axis=1, keepdims=True)
    ex = np.exp(stacked - mx)
    z = ex.sum(axis=1, keepdims=True)
    lse = (mx + np.log(z))[:, 0]
    pos_diag = in_logits[np.arange(b), np.arange(b)]
    loss = float((lse - pos_diag).mean())

    probs = ex / z
    if semi_reps is not None:
        p_semi = probs[:, 0]
        p_in = probs[:, 1:]
    else:
        p_semi = None
        p_in = probs
    coeff = p_in.copy()
    coeff[np.arange(b), np.arange(b)] -= 1.0
    scale = 1.0 / (b * tau)
    d_seq = scale * (coeff @ v)
    d_pos = scale * (coeff.T @ s)
    d_semi = None
    if semi_reps is not None:
        d_seq = d_seq + scale * p_semi[:, None] * sv
        d_semi = scale * p_semi[:, None] * s
    return loss, (d_seq, d_pos, d_semi)


def _check_normalized(name, rows):
    norms = np.linalg.norm(rows, axis=1)
    dev = np.abs(norms - 1.0).max()
    if dev > NORM_TOL:
        raise DataError(
            f"{name} must be L2-normalized (max deviation {dev:.3g})")


def context_reps(table, item_codes, batch):
    """(B, n, d_v) representations for a padded batch, zeros past lengths."""
    b, n = batch.item_ids.shape
    flat = itemrep.item_reps(table, item_codes[batch.item_ids.ravel()])
    reps = flat.reshape(b, n, -1)
    reps[batch.lengths[:, None] <= np.arange(n)] = 0.0
    return reps


def _semi_synthetic_batch(codes, rho, num_centroids, rng):
    flip = rng.random(codes.shape) < rho
    draws = rng.integers(0, num_centroids, size=codes.shape)
    return np.where(flip, draws, codes)


def validation_ndcg(enc_params, table, item_codes, split, subset, k=10):
    model = ScoringModel(enc_params, itemrep.item_reps(table, item_codes))
    ranks, _ = ranks_for_split(model, split, which="valid", user_subset=subset)
    return float(np.mean([ndcg_at_k(r, k) for r in ranks]))


def pretrain(split, codebook, item_codes, encoder_cfg, config, config_text=""):
    """Run the contrastive pre-training loop and return the best checkpoint.

    encoder_cfg is (n_layers, n_heads, d_model, n_max); item_codes must be
    the precomputed codes of every corpus item under `codebook`. Model
    selection keeps the snapshot with the highest validation NDCG@10 and
    stops once `patience` consecutive epochs fail to improve it.
    """
    config.validate()
    n_layers, n_heads, d_model, n_max = encoder_cfg
    num_subspaces, num_centroids = codebook.num_subspaces, codebook.num_centroids
    if item_codes.shape != (split.num_items, num_subspaces):
        raise ConfigError("item_codes shape does not match corpus/codebook")

    root = np.random.SeedSequence(config.seed)
    init_seed, loop_seed, valid_seed = root.spawn(3)
    table = itemrep.init_table(num_subspaces, num_centroids, d_model,
                               init_seed)
    enc_params = enc.init_encoder(n_layers, n_heads, d_model, n_max,
                                  init_seed.spawn(1)[0])
    rng = np.random.default_rng(loop_seed)

    n_users = len(split.sequences)
    cap = min(config.valid_users_cap, n_users)
    subset = np.sort(np.random.default_rng(valid_seed).choice(
        n_users, size=cap, replace=False))

    params = {"table": table, **enc_params.tensors}
    opt = Adam(config.lr)
    best = None
    since_improve = 0
    log = []

    for epoch in range(1, config.max_epochs + 1):
        epoch_loss = 0.0
        for step in range(config.steps_per_epoch):
            batch = sample_batch(split, config.batch_size, rng,
                                 max_context_len=n_max)
            reps = context_reps(table, item_codes, batch)
            drop_rng = rng if config.dropout > 0 else None
            y, cache = enc.forward_batch(enc_params, reps, batch.lengths,
                                         dropout=config.dropout, rng=drop_rng)
            pos_raw = itemrep.item_reps(table, item_codes[batch.positives])

            semi_codes = None
            semi_raw = None
            if not config.disable_semi_synthetic:
                semi_codes = _semi_synthetic_batch(
                    item_codes[batch.positives], config.rho, num_centroids, rng)
                semi_raw = itemrep.item_reps(table, semi_codes)

            y_norms = np.linalg.norm(y, axis=1, keepdims=True)
            pos_norms = np.linalg.norm(pos_raw, axis=1, keepdims=True)
            if np.any(y_norms == 0) or np.any(pos_norms == 0):
                raise DataError("zero-norm representation during pre-training")
            s_n = y / y_norms
            v_n = pos_raw / pos_norms
            sv_n = None
            semi_norms = None
            if semi_raw is not None:
                semi_norms = np.linalg.norm(semi_raw, axis=1, keepdims=True)
                if np.any(semi_norms == 0):
                    raise DataError("zero-norm semi-synthetic representation")
                sv_n = semi_raw / semi_norms

            loss, (d_s, d_v, d_sv) = contrastive_loss(s_n, v_n, sv_n,
                                                      config.tau)
            if not np.isfinite(loss):
                raise DataError(
                    f"training diverged: non-finite loss at epoch {epoch} "
                    f"step {step}")
            epoch_loss += loss

            d_y = itemrep.normalize_rows_backward(y, y_norms, d_s)
            d_pos = itemrep.normalize_rows_backward(pos_raw, pos_norms, d_v)
            enc_grads, d_reps = enc.backward_batch(enc_params, cache, d_y)

            table_grad = np.zeros_like(table)
            mask = batch.lengths[:, None] > np.arange(batch.item_ids.shape[1])
            itemrep.scatter_rep_grad(table_grad,
                                     item_codes[batch.item_ids[mask]],
                                     d_reps[mask])
            itemrep.scatter_rep_grad(table_grad, item_codes[batch.positives],
                                     d_pos)
            if semi_raw is not None:
                d_semi = itemrep.normalize_rows_backward(semi_raw, semi_norms,
                                                         d_sv)
                itemrep.scatter_rep_grad(table_grad, semi_codes, d_semi)

            opt.step(params, {"table": table_grad, **enc_grads})

        val = validation_ndcg(enc_params, table, item_codes, split, subset)
        mean_loss = epoch_loss / config.steps_per_epoch
        log.append(f"stage=pretrain epoch={epoch} loss={mean_loss:.6f} "
                   f"val_ndcg10={val:.6f}")
        if best is None or val > best[0]:
            best = (val, table.copy(), enc_params.copy(),
                    {k: a.copy() for k, a in opt.state_arrays().items()})
            since_improve = 0
        else:
            since_improve += 1
            if since_improve > config.patience:
                log.append(f"stage=pretrain early_stop_epoch={epoch}")
                break

    _, best_table, best_enc, best_opt = best
    return Checkpoint(
        config_text=config_text,
        codebook=codebook,
        table=best_table,
        encoder=best_enc,
        optimizer_arrays=best_opt,
        log=log,
        item_codes=item_codes,
    )
