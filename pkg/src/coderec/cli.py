"""Command-line entry point wiring all pipeline stages.

Exit codes: 0 on success, 1 on runtime failure, 2 on configuration or
validation failure (including missing input artifacts). Stage progress is
printed as line-oriented key=value logs. Heavy imports happen inside the
command handlers so that the `threads` knob can cap the BLAS thread pools
before numpy is loaded.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import (GlobalConfig, load_config_file, preset_config,
                     validate_config)
from .errors import CoderecError, ConfigError


def build_parser():
    parser = argparse.ArgumentParser(
        prog="coderec",
        description="Vector-quantized item codes for transferable "
                    "sequential recommendation")
    parser.add_argument("--config", help="path to a key=value config file")
    parser.add_argument("--preset", choices=["desk", "paper"], default=None,
                        help="built-in configuration preset")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--threads", type=int, default=None,
                        help="override the config thread count")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("quantize", help="train an OPQ codebook")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("stats", help="report code distribution diagnostics")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--report", default=None)

    p = sub.add_parser("pretrain", help="contrastive multi-domain pre-training")
    p.add_argument("--interactions", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("align", help="learn code-embedding alignment")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--interactions", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("finetune", help="fine-tune the aligned embedding table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--alignment", default=None)
    p.add_argument("--interactions", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--harden", action="store_true",
                   help="harden the alignment to a true permutation")

    p = sub.add_parser("eval", help="full-ranking evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--interactions", required=True)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--split", choices=["test", "valid"], default="test")
    p.add_argument("--report", default=None)

    p = sub.add_parser("extend", help="score held-out items inductively")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--new-embeddings", required=True)
    p.add_argument("--interactions", default=None)
    p.add_argument("--report", default=None)

    p = sub.add_parser("ablate", help="run the ablation grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--interactions", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--semisynth-checkpoint", default=None)
    p.add_argument("--report", default=None)
    return parser


def _resolve_config(args):
    if args.config and args.preset:
        raise ConfigError("--config and --preset are mutually exclusive")
    if args.config:
        cfg = load_config_file(args.config)
    elif args.preset:
        cfg = preset_config(args.preset)
    else:
        cfg = GlobalConfig()
    if args.threads is not None:
        cfg.set("threads", args.threads)
    validate_config(cfg)
    return cfg


def _apply_threads(cfg):
    threads = cfg.get("threads")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, str(threads))


def _require(path, what):
    if path and not os.path.exists(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


def _seed(args, cfg):
    return args.seed if args.seed is not None else cfg.get("seed")


def _write_or_print(text, path):
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)


def cmd_synth(args, cfg):
    from .corpus import save_embeddings, save_interactions, select_domains
    from .pipeline import run_synth
    seed = _seed(args, cfg)
    dataset, embeddings = run_synth(cfg, seed)
    os.makedirs(args.out_dir, exist_ok=True)
    n_target = cfg.get("synth.target_domains")
    pre_domains = list(range(dataset.num_domains - n_target))
    tgt_domains = list(range(dataset.num_domains - n_target,
                             dataset.num_domains))
    jobs = [("pretrain", pre_domains)]
    if tgt_domains:
        jobs.append(("target", tgt_domains))
    for name, domains in jobs:
        sub, emb, _ = select_domains(dataset, embeddings, domains)
        inter = os.path.join(args.out_dir, f"{name}.inter")
        fvecs = os.path.join(args.out_dir, f"{name}.fvecs")
        save_interactions(sub, inter)
        save_embeddings(emb, fvecs)
        print(f"stage=synth role={name} sequences={len(sub.sequences)} "
              f"items={sub.num_items} path={inter}")
    return 0


def cmd_quantize(args, cfg):
    from .checkpoint import pack_codebook, write_container
    from .corpus import load_embeddings
    from .pipeline import run_quantize
    from .quantizer import encode_all, reconstruction_error
    _require(args.embeddings, "embedding file")
    embeddings = load_embeddings(args.embeddings)
    codebook = run_quantize(embeddings, cfg, _seed(args, cfg))
    write_container(args.out, {"config": cfg.to_text().encode("utf-8"),
                               "codebook": pack_codebook(codebook)})
    mse = reconstruction_error(codebook, embeddings)
    codes = encode_all(codebook, embeddings)
    print(f"stage=quantize items={embeddings.shape[0]} "
          f"D={codebook.num_subspaces} M={codebook.num_centroids} "
          f"mse={mse:.6f} distinct_codes={len(set(map(tuple, codes)))} "
          f"out={args.out}")
    return 0


def _load_codebook(path):
    from .checkpoint import read_container, unpack_codebook
    from .errors import FormatError
    sections = read_container(path)
    if "codebook" not in sections:
        raise FormatError(f"{path}: no codebook section")
    return unpack_codebook(sections["codebook"])


def cmd_stats(args, cfg):
    from .corpus import load_embeddings
    from .quantizer import code_stats, encode_all
    _require(args.embeddings, "embedding file")
    _require(args.codebook, "codebook artifact")
    embeddings = load_embeddings(args.embeddings)
    codebook = _load_codebook(args.codebook)
    stats = code_stats(encode_all(codebook, embeddings),
                       codebook.num_centroids)
    lines = [f"items={stats.num_items}",
             f"collisions={stats.collision_count}",
             f"collision_rate={stats.collision_rate:.6f}"]
    for k, h in enumerate(stats.entropy_bits):
        lines.append(f"dim.{k}.entropy_bits={h:.4f}")
    _write_or_print("\n".join(lines), args.report)
    return 0


def cmd_pretrain(args, cfg):
    from .checkpoint import save_checkpoint
    from .corpus import load_embeddings, load_interactions
    from .pipeline import run_pretrain
    _require(args.interactions, "interaction file")
    _require(args.embeddings, "embedding file")
    _require(args.codebook, "codebook artifact")
    embeddings = load_embeddings(args.embeddings)
    dataset = load_interactions(
        args.interactions, num_items=embeddings.shape[0],
        min_interactions=cfg.get("corpus.min_interactions"))
    codebook = _load_codebook(args.codebook)
    ckpt = run_pretrain(dataset, embeddings, codebook, cfg, _seed(args, cfg))
    for line in ckpt.log:
        print(line)
    save_checkpoint(ckpt, args.out)
    print(f"stage=pretrain out={args.out}")
    return 0


def cmd_align(args, cfg):
    from .checkpoint import load_checkpoint, params_digest, save_alignment
    from .corpus import load_embeddings, load_interactions
    from .pipeline import encoder_arch, finetune_config_from, run_quantize
    from .corpus import leave_one_out_split
    from .quantizer import encode_all
    from .transfer import align_stage
    import numpy as np
    _require(args.checkpoint, "checkpoint")
    _require(args.interactions, "interaction file")
    _require(args.embeddings, "embedding file")
    ckpt = load_checkpoint(args.checkpoint)
    embeddings = load_embeddings(args.embeddings)
    dataset = load_interactions(
        args.interactions, num_items=embeddings.shape[0],
        min_interactions=cfg.get("corpus.min_interactions"))
    seed = _seed(args, cfg)
    cb_seed = int(np.random.SeedSequence([seed, 7]).generate_state(1)[0])
    codebook = run_quantize(embeddings, cfg, cb_seed)
    codes = encode_all(codebook, embeddings)
    split = leave_one_out_split(dataset)
    log = []
    fcfg = finetune_config_from(cfg, seed)
    alignment = align_stage(ckpt, split, codebook, codes, fcfg, log=log)
    for line in log:
        print(line)
    save_alignment(alignment, args.out,
                   provenance=params_digest(ckpt.table, ckpt.encoder))
    print(f"stage=align out={args.out}")
    return 0


def cmd_finetune(args, cfg):
    from .checkpoint import load_alignment, load_checkpoint, save_checkpoint
    from .corpus import load_embeddings, load_interactions
    from .pipeline import run_transfer
    _require(args.checkpoint, "checkpoint")
    _require(args.interactions, "interaction file")
    _require(args.embeddings, "embedding file")
    if args.harden:
        cfg.set("transfer.harden", True)
    alignment = None
    if args.alignment:
        _require(args.alignment, "alignment artifact")
        alignment = load_alignment(args.alignment)
    elif not cfg.get("transfer.skip_alignment"):
        raise ConfigError(
            "--alignment is required unless transfer.skip_alignment is set")
    ckpt = load_checkpoint(args.checkpoint)
    embeddings = load_embeddings(args.embeddings)
    dataset = load_interactions(
        args.interactions, num_items=embeddings.shape[0],
        min_interactions=cfg.get("corpus.min_interactions"))
    down, _ = run_transfer(ckpt, dataset, embeddings, cfg, _seed(args, cfg),
                           alignment=alignment)
    for line in down.log:
        print(line)
    save_checkpoint(down, args.out)
    print(f"stage=finetune out={args.out}")
    return 0


def cmd_eval(args, cfg):
    from .checkpoint import load_checkpoint
    from .corpus import load_embeddings, load_interactions
    from .evaluation import format_report, report_to_kv
    from .pipeline import evaluate_dataset, scoring_model, zero_shot_model
    _require(args.checkpoint, "checkpoint")
    _require(args.interactions, "interaction file")
    ckpt = load_checkpoint(args.checkpoint)
    num_items = (ckpt.item_codes.shape[0]
                 if ckpt.item_codes is not None else None)
    if args.embeddings:
        _require(args.embeddings, "embedding file")
        embeddings = load_embeddings(args.embeddings)
        num_items = embeddings.shape[0]
        model = zero_shot_model(ckpt, embeddings)
    else:
        if num_items is None:
            raise ConfigError(
                "checkpoint has no item codes; pass --embeddings")
        model = scoring_model(ckpt)
    dataset = load_interactions(
        args.interactions, num_items=num_items,
        min_interactions=cfg.get("corpus.min_interactions"))
    report = evaluate_dataset(model, dataset, cfg, which=args.split)
    print(format_report(report))
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(report_to_kv(report) + "\n")
    return 0


def cmd_extend(args, cfg):
    from .checkpoint import load_checkpoint
    from .corpus import load_embeddings, load_interactions
    from .evaluation import ScoringModel, evaluate, format_report, report_to_kv
    from .corpus import leave_one_out_split
    from .transfer import inductive_extend
    _require(args.checkpoint, "checkpoint")
    _require(args.new_embeddings, "embedding file")
    ckpt = load_checkpoint(args.checkpoint)
    new_embeddings = load_embeddings(args.new_embeddings)
    codes, reps = inductive_extend(ckpt, new_embeddings)
    print(f"stage=extend base_items={len(ckpt.item_codes)} "
          f"new_items={len(new_embeddings)} catalog={len(codes)}")
    if args.interactions:
        _require(args.interactions, "interaction file")
        dataset = load_interactions(
            args.interactions, num_items=len(codes),
            min_interactions=cfg.get("corpus.min_interactions"))
        model = ScoringModel(ckpt.encoder, reps)
        report = evaluate(model, leave_one_out_split(dataset),
                          ks=tuple(cfg.get("eval.ks")))
        print(format_report(report))
        if args.report:
            with open(args.report, "w", encoding="utf-8") as fh:
                fh.write(report_to_kv(report) + "\n")
    return 0


def cmd_ablate(args, cfg):
    from .checkpoint import load_checkpoint
    from .corpus import load_embeddings, load_interactions
    from .pipeline import format_ablation, run_ablation
    _require(args.checkpoint, "checkpoint")
    _require(args.interactions, "interaction file")
    _require(args.embeddings, "embedding file")
    ckpt = load_checkpoint(args.checkpoint)
    semisynth = None
    if args.semisynth_checkpoint:
        _require(args.semisynth_checkpoint, "semi-synthetic-ablated checkpoint")
        semisynth = load_checkpoint(args.semisynth_checkpoint)
    embeddings = load_embeddings(args.embeddings)
    dataset = load_interactions(
        args.interactions, num_items=embeddings.shape[0],
        min_interactions=cfg.get("corpus.min_interactions"))
    rows = run_ablation(ckpt, dataset, embeddings, cfg, _seed(args, cfg),
                        semisynth_ckpt=semisynth)
    table = format_ablation(rows, ks=tuple(cfg.get("eval.ks")))
    _write_or_print(table, args.report)
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "quantize": cmd_quantize,
    "stats": cmd_stats,
    "pretrain": cmd_pretrain,
    "align": cmd_align,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "extend": cmd_extend,
    "ablate": cmd_ablate,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
        _apply_threads(cfg)
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CoderecError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
