"""Flat key=value configuration with presets and cross-module validation.

The config file is plain text, one `section.key = value` per line, `#`
comments allowed. Parsing and serialization round-trip exactly. This module
deliberately avoids numpy so the CLI can parse configuration (including the
`threads` knob) before any numerical library is imported.
"""

from __future__ import annotations

from .errors import ConfigError

# key -> (type tag, default). Types: int, float, bool, str, intlist.
SCHEMA = [
    ("seed", "int", 7),
    ("threads", "int", 1),
    ("corpus.min_interactions", "int", 5),
    ("synth.num_domains", "int", 4),
    ("synth.items_per_domain", "int", 500),
    ("synth.users_per_domain", "int", 2000),
    ("synth.seq_len_min", "int", 8),
    ("synth.seq_len_max", "int", 16),
    ("synth.embed_dim", "int", 32),
    ("synth.latent_dim", "int", 8),
    ("synth.overlap", "float", 0.7),
    ("synth.domain_shift", "float", 1.0),
    ("synth.noise", "float", 0.05),
    ("synth.markov_temp", "float", 1.0),
    ("synth.target_domains", "int", 1),
    ("quantizer.num_subspaces", "int", 8),
    ("quantizer.num_centroids", "int", 16),
    ("quantizer.opq_iters", "int", 20),
    ("quantizer.kmeans_iters", "int", 100),
    ("encoder.layers", "int", 2),
    ("encoder.heads", "int", 2),
    ("encoder.dim", "int", 64),
    ("encoder.max_positions", "int", 50),
    ("pretrain.batch_size", "int", 256),
    ("pretrain.temperature", "float", 0.07),
    ("pretrain.semi_ratio", "float", 0.75),
    ("pretrain.lr", "float", 0.001),
    ("pretrain.epochs", "int", 30),
    ("pretrain.patience", "int", 10),
    ("pretrain.steps_per_epoch", "int", 100),
    ("pretrain.valid_users", "int", 2000),
    ("pretrain.dropout", "float", 0.0),
    ("pretrain.disable_semi_synthetic", "bool", False),
    ("transfer.align_epochs", "int", 3),
    ("transfer.table_epochs", "int", 5),
    ("transfer.align_lr", "float", 0.03),
    ("transfer.table_lr", "float", 0.001),
    ("transfer.batch_size", "int", 256),
    ("transfer.sinkhorn_temp", "float", 0.1),
    ("transfer.sinkhorn_iters", "int", 3),
    ("transfer.gumbel_noise", "float", 0.1),
    ("transfer.valid_users", "int", 2000),
    ("transfer.harden", "bool", False),
    ("transfer.skip_alignment", "bool", False),
    ("transfer.random_code", "bool", False),
    ("transfer.reuse_pretrain_codebook", "bool", False),
    ("transfer.no_pretrain", "bool", False),
    ("eval.ks", "intlist", (10, 50)),
    ("eval.bucket_edges", "intlist", (0, 5, 20, 50)),
    ("eval.exclude_context", "bool", False),
]

_TYPES = {key: kind for key, kind, _ in SCHEMA}
_DEFAULTS = {key: default for key, _, default in SCHEMA}
_ORDER = [key for key, _, _ in SCHEMA]

# The paper-scale preset: 32 centroids x 256 sub-spaces over 768-dim
# encodings, batch 2048, 300 epochs, patience 10, 3 sinkhorn iterations.
PRESETS = {
    "desk": {},
    "paper": {
        "synth.embed_dim": 768,
        "synth.latent_dim": 64,
        "quantizer.num_subspaces": 256,
        "quantizer.num_centroids": 32,
        "pretrain.batch_size": 2048,
        "pretrain.epochs": 300,
        "pretrain.steps_per_epoch": 500,
    },
}


class GlobalConfig:
    """Typed key-value configuration; values live in a plain dict."""

    def __init__(self, values=None):
        self.values = dict(_DEFAULTS)
        if values:
            for key, val in values.items():
                self.set(key, val)

    def __eq__(self, other):
        return isinstance(other, GlobalConfig) and self.values == other.values

    def get(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise ConfigError(f"unknown config key {key!r}") from None

    def set(self, key, value):
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            value = _parse_value(key, value)
        else:
            value = _coerce(key, value)
        self.values[key] = value
        return self

    def to_text(self):
        lines = []
        section = None
        for key in _ORDER:
            head = key.split(".")[0] if "." in key else ""
            if head != section:
                if lines:
                    lines.append("")
                section = head
            lines.append(f"{key} = {_format_value(key, self.values[key])}")
        return "\n".join(lines) + "\n"

    def copy(self):
        return GlobalConfig(dict(self.values))


def _parse_value(key, text):
    kind = _TYPES[key]
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text in ("true", "false"):
                return text == "true"
            raise ValueError(text)
        if kind == "intlist":
            if not text:
                return ()
            return tuple(int(tok.strip()) for tok in text.split(","))
        return text
    except ValueError:
        raise ConfigError(
            f"config key {key!r}: cannot parse {text!r} as {kind}") from None


def _coerce(key, value):
    kind = _TYPES[key]
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    if kind == "bool":
        return bool(value)
    if kind == "intlist":
        return tuple(int(v) for v in value)
    return str(value)


def _format_value(key, value):
    kind = _TYPES[key]
    if kind == "bool":
        return "true" if value else "false"
    if kind == "intlist":
        return ",".join(str(v) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


def parse_config(text):
    cfg = GlobalConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _TYPES:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        cfg.set(key, value)
    return cfg


def load_config_file(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None


def preset_config(name):
    if name not in PRESETS:
        raise ConfigError(
            f"unknown preset {name!r} (choose from {sorted(PRESETS)})")
    cfg = GlobalConfig()
    for key, value in PRESETS[name].items():
        cfg.set(key, value)
    return cfg


def validate_config(cfg):
    """Cross-module consistency checks; raises ConfigError naming the field."""
    checks = [
        ("threads", cfg.get("threads") >= 1, "must be >= 1"),
        ("corpus.min_interactions", cfg.get("corpus.min_interactions") >= 0,
         "must be non-negative"),
        ("synth.overlap", 0.0 <= cfg.get("synth.overlap") <= 1.0,
         "must be in [0, 1]"),
        ("synth.seq_len_min", cfg.get("synth.seq_len_min") >= 3,
         "must be >= 3"),
        ("synth.seq_len_max",
         cfg.get("synth.seq_len_max") >= cfg.get("synth.seq_len_min"),
         "must be >= synth.seq_len_min"),
        ("synth.target_domains",
         0 <= cfg.get("synth.target_domains") < cfg.get("synth.num_domains"),
         "must leave at least one pre-training domain"),
        ("synth.embed_dim",
         cfg.get("synth.embed_dim") % cfg.get("quantizer.num_subspaces") == 0,
         "must be divisible by quantizer.num_subspaces"),
        ("quantizer.num_centroids", cfg.get("quantizer.num_centroids") >= 1,
         "must be positive"),
        ("quantizer.opq_iters", cfg.get("quantizer.opq_iters") >= 0,
         "must be non-negative"),
        ("encoder.dim",
         cfg.get("encoder.dim") % cfg.get("encoder.heads") == 0,
         "must be divisible by encoder.heads"),
        ("encoder.max_positions", cfg.get("encoder.max_positions") >= 1,
         "must be positive"),
        ("pretrain.batch_size", cfg.get("pretrain.batch_size") >= 2,
         "must be >= 2 for in-batch negatives"),
        ("pretrain.temperature", cfg.get("pretrain.temperature") > 0,
         "must be positive"),
        ("pretrain.semi_ratio", 0.0 <= cfg.get("pretrain.semi_ratio") <= 1.0,
         "must be in [0, 1]"),
        ("pretrain.dropout", 0.0 <= cfg.get("pretrain.dropout") < 1.0,
         "must be in [0, 1)"),
        ("transfer.sinkhorn_temp", cfg.get("transfer.sinkhorn_temp") > 0,
         "must be positive"),
        ("transfer.sinkhorn_iters", cfg.get("transfer.sinkhorn_iters") >= 1,
         "must be >= 1"),
        ("transfer.gumbel_noise", cfg.get("transfer.gumbel_noise") >= 0.0,
         "must be non-negative"),
        ("eval.ks", len(cfg.get("eval.ks")) > 0
         and all(k >= 1 for k in cfg.get("eval.ks")), "must list K >= 1"),
        ("transfer.random_code",
         not (cfg.get("transfer.random_code")
              and cfg.get("transfer.reuse_pretrain_codebook")),
         "conflicts with transfer.reuse_pretrain_codebook"),
    ]
    for field, ok, message in checks:
        if not ok:
            raise ConfigError(f"{field}: {message}")
    return cfg
