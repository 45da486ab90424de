"""Interaction corpora: file formats, filtering, splitting and batch sampling.

A corpus is a set of per-(user, domain) interaction sequences over a global
item index space, paired with one text-embedding row per item. Real corpora
are read from disk; the synthetic generator produces seeded multi-domain
corpora with a controllable cross-domain latent overlap so that transfer
behaviour can be studied at desk scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError, ParseError

DEFAULT_MIN_INTERACTIONS = 5


@dataclass(frozen=True)
class UserSequence:
    """One chronologically ordered interaction sequence of a user in a domain."""

    user_id: str
    domain_id: int
    items: np.ndarray  # int64, shape (length,)

    def __len__(self):
        return len(self.items)


@dataclass
class InteractionDataset:
    """Filtered multi-domain interaction sequences over a global item space."""

    sequences: list[UserSequence]
    num_items: int
    num_domains: int

    def validate(self):
        seen = set()
        for seq in self.sequences:
            if len(seq.items) < 3:
                raise DataError(
                    f"sequence for user {seq.user_id!r} has fewer than 3 items")
            if seq.items.min(initial=0) < 0 or (len(seq.items)
                                                and seq.items.max() >= self.num_items):
                raise DataError(
                    f"sequence for user {seq.user_id!r} references an item "
                    f"outside [0, {self.num_items})")
            if not 0 <= seq.domain_id < self.num_domains:
                raise DataError(
                    f"sequence for user {seq.user_id!r} has domain "
                    f"{seq.domain_id} outside [0, {self.num_domains})")
            key = (seq.user_id, seq.domain_id)
            if key in seen:
                raise DataError(f"duplicate sequence for user/domain {key}")
            seen.add(key)
        return self


@dataclass
class SplitDataset:
    """Leave-one-out view of a dataset.

    Per sequence the last item is the test target, the one before it the
    validation target, and the remaining prefix is training context.
    """

    sequences: list[UserSequence]
    num_items: int
    num_domains: int
    # (instance, 2) rows of (sequence index, prefix end); the training
    # instance i is context train_items[:end] -> positive train_items[end].
    train_instances: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.train_instances is None:
            pairs = []
            for si, seq in enumerate(self.sequences):
                n_train = len(seq.items) - 2
                for end in range(1, n_train):
                    pairs.append((si, end))
            self.train_instances = (np.asarray(pairs, dtype=np.int64)
                                    if pairs else np.empty((0, 2), np.int64))

    def train_items(self, si):
        return self.sequences[si].items[:-2]

    def valid_context(self, si):
        return self.sequences[si].items[:-2]

    def valid_target(self, si):
        return int(self.sequences[si].items[-2])

    def test_context(self, si):
        return self.sequences[si].items[:-1]

    def test_target(self, si):
        return int(self.sequences[si].items[-1])

    @property
    def num_train_instances(self):
        return len(self.train_instances)


@dataclass
class TrainingBatch:
    """Padded batch of (context, positive) training instances.

    item_ids carries zeros past each row's valid length; consumers must mask
    with lengths rather than trusting the padded cells.
    """

    item_ids: np.ndarray   # (B, n) int64
    lengths: np.ndarray    # (B,) int64, each >= 1
    positives: np.ndarray  # (B,) int64
    domains: np.ndarray    # (B,) int64

    @property
    def batch_size(self):
        return len(self.positives)


# ---------------------------------------------------------------------------
# Interaction file I/O (user_id<TAB>domain_id<TAB>i1 i2 ... ik)
# ---------------------------------------------------------------------------

def load_interactions(path, num_items=None,
                      min_interactions=DEFAULT_MIN_INTERACTIONS):
    """Read an interaction file and apply the minimum-interaction filter.

    Users (per domain) and items with fewer than `min_interactions`
    occurrences are removed, iterating until stable, so every surviving
    sequence supports a leave-one-out split. `num_items` fixes the item
    index space; when omitted it is inferred as max index + 1.
    """
    raw = []
    max_item = -1
    max_domain = -1
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError("expected user_id<TAB>domain_id<TAB>items",
                                 line=lineno)
            user_id, domain_text, item_text = parts
            try:
                domain_id = int(domain_text)
            except ValueError:
                raise ParseError(f"domain id {domain_text!r} is not an integer",
                                 line=lineno) from None
            if domain_id < 0:
                raise ParseError("domain id must be non-negative", line=lineno)
            try:
                items = [int(tok) for tok in item_text.split()]
            except ValueError:
                raise ParseError("item indices must be integers",
                                 line=lineno) from None
            if not items:
                raise ParseError("empty item list", line=lineno)
            if min(items) < 0:
                raise ParseError("item indices must be non-negative",
                                 line=lineno)
            if num_items is not None and max(items) >= num_items:
                raise ParseError(
                    f"item index {max(items)} outside [0, {num_items})",
                    line=lineno)
            raw.append((user_id, domain_id,
                        np.asarray(items, dtype=np.int64), lineno))
            max_item = max(max_item, max(items))
            max_domain = max(max_domain, domain_id)

    seen = set()
    for user_id, domain_id, _, lineno in raw:
        key = (user_id, domain_id)
        if key in seen:
            raise ParseError(f"duplicate sequence for user/domain {key}",
                             line=lineno)
        seen.add(key)

    if num_items is None:
        num_items = max_item + 1
    sequences = [UserSequence(u, d, items) for u, d, items, _ in raw]
    sequences = _filter_min_interactions(sequences, min_interactions)
    if not sequences:
        raise DataError("corpus is empty after the minimum-interaction filter")
    num_domains = max(max_domain + 1, 1)
    dataset = InteractionDataset(sequences, num_items, num_domains)
    return dataset.validate()


def _filter_min_interactions(sequences, threshold):
    """Drop items and per-domain user sequences below the threshold, to a fixpoint.

    Sequences additionally need length >= 3 to survive, so the result always
    supports a leave-one-out split.
    """
    min_len = max(threshold, 3)
    if threshold <= 0:
        return [s for s in sequences if len(s.items) >= 3]
    current = sequences
    while True:
        counts = {}
        for seq in current:
            for item in seq.items:
                counts[int(item)] = counts.get(int(item), 0) + 1
        kept_items = {i for i, c in counts.items() if c >= threshold}
        nxt = []
        changed = False
        for seq in current:
            items = np.asarray([i for i in seq.items if int(i) in kept_items],
                               dtype=np.int64)
            if len(items) != len(seq.items):
                changed = True
            if len(items) >= min_len:
                nxt.append(UserSequence(seq.user_id, seq.domain_id, items))
            else:
                changed = True
        current = nxt
        if not changed:
            return current


def save_interactions(dataset, path):
    with open(path, "w", encoding="utf-8") as fh:
        for seq in dataset.sequences:
            items = " ".join(str(int(i)) for i in seq.items)
            fh.write(f"{seq.user_id}\t{seq.domain_id}\t{items}\n")


# ---------------------------------------------------------------------------
# Embedding file I/O (fvecs layout: int32 dim, then dim float32s, repeated)
# ---------------------------------------------------------------------------

def load_embeddings(path):
    """Read an fvecs file into a (num_vectors, d) float64 matrix."""
    words = np.fromfile(path, dtype="<i4")
    if words.size == 0:
        raise FormatError(f"{path}: empty embedding file")
    dim = int(words[0])
    if dim <= 0:
        raise FormatError(f"{path}: vector dimension {dim} is not positive")
    if words.size % (dim + 1) != 0:
        raise FormatError(f"{path}: truncated file or inconsistent dimensions")
    table = words.reshape(-1, dim + 1)
    if not np.all(table[:, 0] == dim):
        bad = int(np.argmin(table[:, 0] == dim))
        raise FormatError(
            f"{path}: vector {bad} has dim {int(table[bad, 0])}, expected {dim}")
    data = table[:, 1:].copy().view("<f4").astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path}: embedding matrix contains NaN or Inf")
    return data


def save_embeddings(matrix, path):
    """Write a (num_vectors, d) matrix as float32 fvecs."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[1] == 0:
        raise ValueError("embedding matrix must be 2-d with at least one column")
    n, dim = matrix.shape
    out = np.empty((n, dim + 1), dtype="<i4")
    out[:, 0] = dim
    out[:, 1:] = matrix.astype("<f4").view("<i4")
    out.tofile(path)


# ---------------------------------------------------------------------------
# Leave-one-out splitting and batch sampling
# ---------------------------------------------------------------------------

def leave_one_out_split(dataset):
    """Split every sequence into train prefix / validation target / test target."""
    for seq in dataset.sequences:
        if len(seq.items) < 3:
            raise DataError(
                f"sequence for user {seq.user_id!r} is too short to split "
                f"(length {len(seq.items)} < 3)")
    return SplitDataset(dataset.sequences, dataset.num_items,
                        dataset.num_domains)


def draw_instances(split, batch_size, rng):
    """Uniform with-replacement draw of training-instance indices."""
    if split.num_train_instances == 0:
        raise DataError("train split holds no (context, positive) instances")
    if batch_size < 1:
        raise ConfigError("batch size must be at least 1")
    return rng.integers(0, split.num_train_instances, size=batch_size)


def sample_batch(split, batch_size, rng, max_context_len=50):
    """Sample a mixed-domain training batch, deterministic given the rng state.

    Instances are (sequence, prefix position) pairs drawn uniformly with
    replacement across all domains; contexts longer than max_context_len keep
    their most recent items.
    """
    idx = draw_instances(split, batch_size, rng)
    rows = split.train_instances[idx]
    lengths = np.minimum(rows[:, 1], max_context_len)
    width = int(lengths.max())
    item_ids = np.zeros((batch_size, width), dtype=np.int64)
    positives = np.empty(batch_size, dtype=np.int64)
    domains = np.empty(batch_size, dtype=np.int64)
    for b, (si, end) in enumerate(rows):
        train = split.train_items(si)
        ctx = train[max(0, end - max_context_len):end]
        item_ids[b, :len(ctx)] = ctx
        positives[b] = train[end]
        domains[b] = split.sequences[si].domain_id
    return TrainingBatch(item_ids, lengths.astype(np.int64), positives, domains)


# ---------------------------------------------------------------------------
# Synthetic multi-domain corpus generator
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Knobs for the seeded synthetic corpus.

    `overlap` is the fraction of latent factors shared across domains for
    corresponding item indices; `domain_shift` and `noise` control the
    domain-specific affine distortion and additive Gaussian noise applied
    when latents are lifted to text embeddings.
    """

    num_domains: int = 2
    items_per_domain: int = 500
    users_per_domain: int = 500
    seq_len_min: int = 8
    seq_len_max: int = 16
    embed_dim: int = 32
    latent_dim: int = 8
    overlap: float = 0.7
    domain_shift: float = 1.0
    noise: float = 0.05
    markov_temp: float = 1.0

    def validate(self):
        if not 0.0 <= self.overlap <= 1.0:
            raise ConfigError(f"overlap must be in [0, 1], got {self.overlap}")
        if self.num_domains < 1 or self.items_per_domain < 2:
            raise ConfigError("need at least one domain and two items per domain")
        if self.users_per_domain < 1:
            raise ConfigError("users_per_domain must be positive")
        if not 3 <= self.seq_len_min <= self.seq_len_max:
            raise ConfigError("need 3 <= seq_len_min <= seq_len_max")
        if self.latent_dim < 1 or self.embed_dim < 1:
            raise ConfigError("latent_dim and embed_dim must be positive")
        if self.domain_shift < 0 or self.noise < 0:
            raise ConfigError("domain_shift and noise must be non-negative")
        if self.markov_temp <= 0:
            raise ConfigError("markov_temp must be positive")
        return self


def synth_corpus(config, seed):
    """Generate a seeded multi-domain corpus and its embedding matrix.

    Item latents share `overlap * latent_dim` leading factors across domains
    (item j of every domain reuses the same shared block). User sequences are
    Markov walks whose transition affinity is latent dot-product similarity,
    and embeddings lift the latents through a global map plus a per-domain
    affine distortion plus noise, simulating the semantic gap between domains.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    n_dom = config.num_domains
    n_item = config.items_per_domain
    q = config.latent_dim
    q_shared = int(round(config.overlap * q))

    shared = rng.standard_normal((n_item, q_shared))
    latents = np.empty((n_dom, n_item, q))
    for d in range(n_dom):
        private = rng.standard_normal((n_item, q - q_shared))
        latents[d] = np.concatenate([shared, private], axis=1)

    lift = rng.standard_normal((q, config.embed_dim)) / math.sqrt(q)
    embeddings = np.empty((n_dom * n_item, config.embed_dim))
    for d in range(n_dom):
        x = latents[d] @ lift
        if config.domain_shift > 0:
            warp = rng.standard_normal((q, config.embed_dim)) / math.sqrt(q)
            offset = rng.standard_normal(config.embed_dim)
            x = x + config.domain_shift * (latents[d] @ warp + offset)
        else:
            # Keep the stream layout independent of the shift magnitude.
            rng.standard_normal((q, config.embed_dim))
            rng.standard_normal(config.embed_dim)
        if config.noise > 0:
            x = x + config.noise * rng.standard_normal(x.shape)
        else:
            rng.standard_normal(x.shape)
        embeddings[d * n_item:(d + 1) * n_item] = x

    sequences = []
    for d in range(n_dom):
        affinity = latents[d] @ latents[d].T / config.markov_temp
        np.fill_diagonal(affinity, -np.inf)
        affinity -= affinity.max(axis=1, keepdims=True)
        probs = np.exp(affinity)
        probs /= probs.sum(axis=1, keepdims=True)
        cdf = np.cumsum(probs, axis=1)
        cdf[:, -1] = 1.0

        n_user = config.users_per_domain
        lengths = rng.integers(config.seq_len_min, config.seq_len_max + 1,
                               size=n_user)
        max_len = int(lengths.max())
        walks = np.empty((n_user, max_len), dtype=np.int64)
        walks[:, 0] = rng.integers(0, n_item, size=n_user)
        for t in range(1, max_len):
            u = rng.random(n_user)
            rows = cdf[walks[:, t - 1]]
            walks[:, t] = (rows < u[:, None]).sum(axis=1)
        for k in range(n_user):
            items = walks[k, :lengths[k]] + d * n_item
            sequences.append(UserSequence(f"d{d}u{k}", d, items))

    dataset = InteractionDataset(sequences, n_dom * n_item, n_dom).validate()
    return dataset, embeddings


def select_domains(dataset, embeddings, domains):
    """Restrict a corpus to a domain subset, compacting item indices.

    Returns (dataset, embeddings, old_item_index) where old_item_index maps
    the compact index space back to rows of the original embedding matrix.
    """
    domains = sorted(set(int(d) for d in domains))
    for d in domains:
        if not 0 <= d < dataset.num_domains:
            raise ConfigError(f"domain {d} outside [0, {dataset.num_domains})")
    keep = [s for s in dataset.sequences if s.domain_id in domains]
    if not keep:
        raise DataError(f"no sequences in domains {domains}")
    used = np.unique(np.concatenate([s.items for s in keep]))
    remap = np.full(dataset.num_items, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    dom_remap = {d: i for i, d in enumerate(domains)}
    sequences = [UserSequence(s.user_id, dom_remap[s.domain_id],
                              remap[s.items]) for s in keep]
    sub = InteractionDataset(sequences, len(used), len(domains)).validate()
    return sub, embeddings[used], used


def train_popularity(split):
    """Occurrences of every item inside the training prefixes."""
    counts = np.zeros(split.num_items, dtype=np.int64)
    for si in range(len(split.sequences)):
        np.add.at(counts, split.train_items(si), 1)
    return counts
