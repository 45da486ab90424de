import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coderec import config as cfgmod
from coderec.cli import main
from coderec.errors import ConfigError


# -- config parsing -----------------------------------------------------------

def test_defaults_round_trip():
    cfg = cfgmod.GlobalConfig()
    text = cfg.to_text()
    assert cfgmod.parse_config(text) == cfg


def test_round_trip_after_overrides():
    cfg = cfgmod.GlobalConfig()
    cfg.set("pretrain.batch_size", 64)
    cfg.set("transfer.harden", True)
    cfg.set("eval.ks", (5, 25))
    cfg.set("synth.overlap", 0.35)
    again = cfgmod.parse_config(cfg.to_text())
    assert again == cfg
    assert cfgmod.parse_config(again.to_text()) == again


@settings(max_examples=20, deadline=None)
@given(b=st.integers(2, 4096), overlap=st.floats(0, 1),
       harden=st.booleans())
def test_round_trip_property(b, overlap, harden):
    cfg = cfgmod.GlobalConfig()
    cfg.set("pretrain.batch_size", b)
    cfg.set("synth.overlap", overlap)
    cfg.set("transfer.harden", harden)
    assert cfgmod.parse_config(cfg.to_text()) == cfg


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        cfgmod.parse_config("nonsense.key = 3\n")


def test_bad_value_rejected():
    with pytest.raises(ConfigError):
        cfgmod.parse_config("pretrain.batch_size = many\n")
    with pytest.raises(ConfigError):
        cfgmod.parse_config("transfer.harden = yes\n")


def test_comments_and_blank_lines_ignored():
    cfg = cfgmod.parse_config("# comment\n\nseed = 9  # trailing\n")
    assert cfg.get("seed") == 9


def test_presets():
    desk = cfgmod.preset_config("desk")
    paper = cfgmod.preset_config("paper")
    assert desk.get("quantizer.num_subspaces") == 8
    assert desk.get("quantizer.num_centroids") == 16
    assert paper.get("quantizer.num_subspaces") == 256
    assert paper.get("quantizer.num_centroids") == 32
    assert paper.get("pretrain.batch_size") == 2048
    assert paper.get("pretrain.temperature") == pytest.approx(0.07)
    assert paper.get("pretrain.semi_ratio") == pytest.approx(0.75)
    assert paper.get("transfer.sinkhorn_iters") == 3
    assert paper.get("pretrain.patience") == 10
    cfgmod.validate_config(paper)
    with pytest.raises(ConfigError):
        cfgmod.preset_config("galaxy")


@pytest.mark.parametrize("key,value", [
    ("synth.overlap", "1.5"),
    ("pretrain.batch_size", "1"),
    ("encoder.dim", "65"),
    ("synth.embed_dim", "30"),
    ("transfer.sinkhorn_iters", "0"),
])
def test_validation_rejects_inconsistencies(key, value):
    cfg = cfgmod.GlobalConfig()
    cfg.set(key, value)
    with pytest.raises(ConfigError) as err:
        cfgmod.validate_config(cfg)
    assert key.split(".")[0] in str(err.value)


# -- CLI ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def cli_config(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = cfgmod.GlobalConfig()
    for key, value in {
        "synth.num_domains": 2,
        "synth.items_per_domain": 100,
        "synth.users_per_domain": 120,
        "synth.seq_len_min": 6,
        "synth.seq_len_max": 9,
        "synth.target_domains": 1,
        "quantizer.opq_iters": 2,
        "pretrain.batch_size": 32,
        "pretrain.epochs": 2,
        "pretrain.steps_per_epoch": 6,
        "pretrain.valid_users": 40,
        "transfer.align_epochs": 1,
        "transfer.table_epochs": 1,
        "transfer.valid_users": 40,
    }.items():
        cfg.set(key, value)
    path = root / "desk-small.cfg"
    path.write_text(cfg.to_text(), encoding="utf-8")
    return root, path


def test_cli_full_pipeline(cli_config, capsys):
    root, cfg_path = cli_config
    base = ["--config", str(cfg_path), "--seed", "17"]

    assert main(base + ["synth", "--out-dir", str(root / "data")]) == 0
    pre_inter = root / "data" / "pretrain.inter"
    pre_emb = root / "data" / "pretrain.fvecs"
    tgt_inter = root / "data" / "target.inter"
    tgt_emb = root / "data" / "target.fvecs"
    for p in (pre_inter, pre_emb, tgt_inter, tgt_emb):
        assert p.exists()

    codebook = root / "codebook.bin"
    assert main(base + ["quantize", "--embeddings", str(pre_emb),
                        "--out", str(codebook)]) == 0

    stats_file = root / "stats.txt"
    assert main(base + ["stats", "--embeddings", str(pre_emb),
                        "--codebook", str(codebook),
                        "--report", str(stats_file)]) == 0
    stats = stats_file.read_text()
    assert stats.count("entropy_bits") == 8  # one row per code dimension

    ckpt = root / "pretrained.ckpt"
    assert main(base + ["pretrain", "--interactions", str(pre_inter),
                        "--embeddings", str(pre_emb),
                        "--codebook", str(codebook),
                        "--out", str(ckpt)]) == 0
    assert ckpt.exists()

    align = root / "alignment.bin"
    assert main(base + ["align", "--checkpoint", str(ckpt),
                        "--interactions", str(tgt_inter),
                        "--embeddings", str(tgt_emb),
                        "--out", str(align)]) == 0

    tuned = root / "tuned.ckpt"
    assert main(base + ["finetune", "--checkpoint", str(ckpt),
                        "--alignment", str(align),
                        "--interactions", str(tgt_inter),
                        "--embeddings", str(tgt_emb),
                        "--out", str(tuned)]) == 0

    report = root / "eval.kv"
    assert main(base + ["eval", "--checkpoint", str(tuned),
                        "--interactions", str(tgt_inter),
                        "--report", str(report)]) == 0
    parsed = dict(line.split("=", 1)
                  for line in report.read_text().splitlines())
    for key in ("recall@10", "ndcg@10", "recall@50", "ndcg@50"):
        assert 0.0 <= float(parsed[key]) <= 1.0

    capsys.readouterr()  # drain accumulated stage logs


def test_cli_extend(cli_config, tmp_path):
    root, cfg_path = cli_config
    from coderec.corpus import load_embeddings, save_embeddings
    tuned = root / "tuned.ckpt"
    tgt_emb = load_embeddings(root / "data" / "target.fvecs")
    new_path = tmp_path / "new.fvecs"
    save_embeddings(tgt_emb[:4] + 0.05, new_path)
    code = main(["--config", str(cfg_path), "extend",
                 "--checkpoint", str(tuned),
                 "--new-embeddings", str(new_path)])
    assert code == 0


def test_cli_missing_codebook_exits_2(cli_config, capsys):
    root, cfg_path = cli_config
    missing = root / "nope.bin"
    code = main(["--config", str(cfg_path), "pretrain",
                 "--interactions", str(root / "data" / "pretrain.inter"),
                 "--embeddings", str(root / "data" / "pretrain.fvecs"),
                 "--codebook", str(missing),
                 "--out", str(root / "x.ckpt")])
    assert code == 2
    assert str(missing) in capsys.readouterr().err


def test_cli_invalid_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("pretrain.batch_size = 1\n", encoding="utf-8")
    code = main(["--config", str(bad), "synth",
                 "--out-dir", str(tmp_path / "d")])
    assert code == 2
    assert "pretrain.batch_size" in capsys.readouterr().err


def test_cli_runtime_failure_exits_1(cli_config, tmp_path, capsys):
    root, cfg_path = cli_config
    garbage = tmp_path / "garbage.ckpt"
    garbage.write_bytes(b"not a checkpoint at all")
    code = main(["--config", str(cfg_path), "eval",
                 "--checkpoint", str(garbage),
                 "--interactions", str(root / "data" / "target.inter")])
    assert code == 1


def test_cli_commands_do_not_modify_inputs(cli_config):
    root, cfg_path = cli_config
    pre_emb = root / "data" / "pretrain.fvecs"
    before = pre_emb.read_bytes()
    assert main(["--config", str(cfg_path), "quantize",
                 "--embeddings", str(pre_emb),
                 "--out", str(root / "cb2.bin")]) == 0
    assert pre_emb.read_bytes() == before


def test_cli_preset_and_config_conflict(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("seed = 1\n", encoding="utf-8")
    code = main(["--config", str(cfg), "--preset", "desk", "synth",
                 "--out-dir", str(tmp_path / "d")])
    assert code == 2


def test_cli_ablation(cli_config, capsys, tmp_path):
    root, cfg_path = cli_config
    report = tmp_path / "ablation.txt"
    code = main(["--config", str(cfg_path), "--seed", "17", "ablate",
                 "--checkpoint", str(root / "pretrained.ckpt"),
                 "--interactions", str(root / "data" / "target.inter"),
                 "--embeddings", str(root / "data" / "target.fvecs"),
                 "--report", str(report)])
    assert code == 0
    text = report.read_text()
    for variant in ("full", "no_pretrain", "no_finetune", "reuse_codebook",
                    "no_alignment", "random_code"):
        assert variant in text
    assert "no_semi_synthetic" in text and "skipped" in text
    capsys.readouterr()
