"""Stage orchestration shared by the CLI, the ablation harness and tests."""

from __future__ import annotations

import numpy as np

from . import itemrep
from .checkpoint import Checkpoint
from .config import validate_config
from .corpus import SynthConfig, leave_one_out_split, synth_corpus
from .encoder import init_encoder
from .errors import ConfigError
from .evaluation import ScoringModel, evaluate
from .pretrain import PretrainConfig, pretrain
from .quantizer import encode_all, train_opq
from .transfer import (FinetuneConfig, align_stage, finetune_stage,
                       permute_item_codes)


def synth_config_from(cfg):
    return SynthConfig(
        num_domains=cfg.get("synth.num_domains"),
        items_per_domain=cfg.get("synth.items_per_domain"),
        users_per_domain=cfg.get("synth.users_per_domain"),
        seq_len_min=cfg.get("synth.seq_len_min"),
        seq_len_max=cfg.get("synth.seq_len_max"),
        embed_dim=cfg.get("synth.embed_dim"),
        latent_dim=cfg.get("synth.latent_dim"),
        overlap=cfg.get("synth.overlap"),
        domain_shift=cfg.get("synth.domain_shift"),
        noise=cfg.get("synth.noise"),
        markov_temp=cfg.get("synth.markov_temp"),
    )


def pretrain_config_from(cfg, seed):
    return PretrainConfig(
        batch_size=cfg.get("pretrain.batch_size"),
        tau=cfg.get("pretrain.temperature"),
        rho=cfg.get("pretrain.semi_ratio"),
        lr=cfg.get("pretrain.lr"),
        max_epochs=cfg.get("pretrain.epochs"),
        patience=cfg.get("pretrain.patience"),
        steps_per_epoch=cfg.get("pretrain.steps_per_epoch"),
        seed=seed,
        disable_semi_synthetic=cfg.get("pretrain.disable_semi_synthetic"),
        dropout=cfg.get("pretrain.dropout"),
        valid_users_cap=cfg.get("pretrain.valid_users"),
    )


def finetune_config_from(cfg, seed):
    return FinetuneConfig(
        align_epochs=cfg.get("transfer.align_epochs"),
        table_epochs=cfg.get("transfer.table_epochs"),
        align_lr=cfg.get("transfer.align_lr"),
        table_lr=cfg.get("transfer.table_lr"),
        batch_size=cfg.get("transfer.batch_size"),
        tau=cfg.get("pretrain.temperature"),
        sinkhorn_temp=cfg.get("transfer.sinkhorn_temp"),
        sinkhorn_iters=cfg.get("transfer.sinkhorn_iters"),
        gumbel_noise=cfg.get("transfer.gumbel_noise"),
        seed=seed,
        valid_users_cap=cfg.get("transfer.valid_users"),
        harden=cfg.get("transfer.harden"),
        skip_alignment=cfg.get("transfer.skip_alignment"),
        random_code=cfg.get("transfer.random_code"),
        reuse_pretrain_codebook=cfg.get("transfer.reuse_pretrain_codebook"),
        no_pretrain=cfg.get("transfer.no_pretrain"),
    )


def encoder_arch(cfg):
    return (cfg.get("encoder.layers"), cfg.get("encoder.heads"),
            cfg.get("encoder.dim"), cfg.get("encoder.max_positions"))


def run_synth(cfg, seed):
    validate_config(cfg)
    return synth_corpus(synth_config_from(cfg), seed)


def run_quantize(embeddings, cfg, seed):
    validate_config(cfg)
    d = cfg.get("quantizer.num_subspaces")
    if embeddings.shape[1] % d != 0:
        raise ConfigError(
            f"embedding dim {embeddings.shape[1]} is not divisible by "
            f"quantizer.num_subspaces={d}")
    return train_opq(embeddings,
                     num_centroids=cfg.get("quantizer.num_centroids"),
                     num_subspaces=d,
                     outer_iters=cfg.get("quantizer.opq_iters"),
                     seed=seed,
                     kmeans_iters=cfg.get("quantizer.kmeans_iters"))


def run_pretrain(dataset, embeddings, codebook, cfg, seed):
    validate_config(cfg)
    if embeddings.shape[0] != dataset.num_items:
        raise ConfigError("embedding rows do not match the corpus item count")
    split = leave_one_out_split(dataset)
    codes = encode_all(codebook, embeddings)
    return pretrain(split, codebook, codes, encoder_arch(cfg),
                    pretrain_config_from(cfg, seed),
                    config_text=cfg.to_text())


def _fresh_checkpoint(cfg, codebook, seed):
    """Randomly initialized model for the no-pretraining ablation."""
    n_layers, n_heads, d_model, n_max = encoder_arch(cfg)
    root = np.random.SeedSequence([seed, 99])
    table_seed, enc_seed = root.spawn(2)
    table = itemrep.init_table(codebook.num_subspaces,
                               codebook.num_centroids, d_model, table_seed)
    encoder = init_encoder(n_layers, n_heads, d_model, n_max, enc_seed)
    return Checkpoint(config_text=cfg.to_text(), codebook=codebook,
                      table=table, encoder=encoder, log=[])


def run_transfer(ckpt, dataset, embeddings, cfg, seed, alignment=None):
    """Downstream fine-tuning honoring the ablation flags.

    Returns (downstream checkpoint, alignment or None). When an alignment is
    passed in, stage 1 is skipped and the given matrices are used as-is.
    """
    validate_config(cfg)
    if embeddings.shape[0] != dataset.num_items:
        raise ConfigError("embedding rows do not match the corpus item count")
    fcfg = finetune_config_from(cfg, seed).validate()
    split = leave_one_out_split(dataset)
    log = []

    base = ckpt
    if fcfg.no_pretrain:
        base = None  # replaced after the codebook exists

    if fcfg.reuse_pretrain_codebook:
        if ckpt is None:
            raise ConfigError(
                "reuse_pretrain_codebook needs a pre-trained checkpoint")
        codebook = ckpt.codebook
    else:
        cb_seed = int(np.random.SeedSequence([seed, 7]).generate_state(1)[0])
        codebook = run_quantize(embeddings, cfg, cb_seed)
    codes = encode_all(codebook, embeddings)
    if fcfg.random_code:
        codes = permute_item_codes(
            codes, np.random.default_rng(np.random.SeedSequence([seed, 13])))

    if base is None:
        base = _fresh_checkpoint(cfg, codebook, seed)

    if alignment is None and not fcfg.skip_alignment:
        alignment = align_stage(base, split, codebook, codes, fcfg, log=log)
    down = finetune_stage(base, alignment, split, codebook, codes, fcfg,
                          config_text=cfg.to_text(), log=log)
    return down, alignment


def scoring_model(ckpt):
    """Catalog scorer from a checkpoint's own item codes."""
    if ckpt.item_codes is None:
        raise ConfigError("checkpoint carries no item codes; pass embeddings")
    reps = itemrep.item_reps(ckpt.table, ckpt.item_codes)
    return ScoringModel(ckpt.encoder, reps)


def zero_shot_model(ckpt, embeddings):
    """Score a new catalog with the pre-trained codebook and table only."""
    codes = encode_all(ckpt.codebook, embeddings)
    reps = itemrep.item_reps(ckpt.table, codes)
    return ScoringModel(ckpt.encoder, reps)


def evaluate_dataset(model, dataset, cfg, which="test"):
    split = leave_one_out_split(dataset)
    edges = cfg.get("eval.bucket_edges")
    return evaluate(model, split, ks=tuple(cfg.get("eval.ks")),
                    bucket_edges=edges if edges else None, which=which,
                    exclude_context=cfg.get("eval.exclude_context"))


ABLATION_VARIANTS = [
    "full",
    "no_pretrain",
    "no_semi_synthetic",
    "no_finetune",
    "reuse_codebook",
    "no_alignment",
    "random_code",
]


def run_ablation(ckpt, dataset, embeddings, cfg, seed,
                 semisynth_ckpt=None):
    """Run the ablation grid on one downstream corpus.

    Returns a list of (variant, EvalReport or None, note) rows. Variants with
    missing prerequisites are skipped with a note instead of failing.
    """
    rows = []
    for variant in ABLATION_VARIANTS:
        vcfg = cfg.copy()
        source = ckpt
        note = ""
        if variant == "no_pretrain":
            vcfg.set("transfer.no_pretrain", True)
        elif variant == "no_semi_synthetic":
            if semisynth_ckpt is None:
                rows.append((variant, None,
                             "skipped: no checkpoint pre-trained without "
                             "semi-synthetic negatives was provided"))
                continue
            source = semisynth_ckpt
        elif variant == "reuse_codebook":
            vcfg.set("transfer.reuse_pretrain_codebook", True)
        elif variant == "no_alignment":
            vcfg.set("transfer.skip_alignment", True)
        elif variant == "random_code":
            vcfg.set("transfer.random_code", True)

        if variant == "no_finetune":
            model = zero_shot_model(ckpt, embeddings)
        else:
            down, _ = run_transfer(source, dataset, embeddings, vcfg, seed)
            model = scoring_model(down)
        report = evaluate_dataset(model, dataset, vcfg)
        rows.append((variant, report, note))
    return rows


def format_ablation(rows, ks=(10, 50)):
    headers = ["variant"]
    for k in ks:
        headers += [f"R@{k}", f"N@{k}"]
    width = max(len(r[0]) for r in rows)
    lines = ["  ".join([headers[0].ljust(width)]
                       + [h.rjust(8) for h in headers[1:]])]
    for variant, report, note in rows:
        if report is None:
            lines.append(f"{variant.ljust(width)}  {note}")
            continue
        cells = []
        for k in ks:
            cells.append(f"{report.metrics[f'recall@{k}']:.4f}".rjust(8))
            cells.append(f"{report.metrics[f'ndcg@{k}']:.4f}".rjust(8))
        lines.append("  ".join([variant.ljust(width)] + cells))
    return "\n".join(lines)
