import math

import numpy as np
import pytest

from coderec import encoder
from coderec.errors import ConfigError

from conftest import central_diff, max_rel_error


def tiny_params(n_layers=1, n_heads=1, d_model=4, n_max=4, seed=0):
    return encoder.init_encoder(n_layers, n_heads, d_model, n_max, seed)


# -- construction -------------------------------------------------------------

def test_init_deterministic():
    a = tiny_params(seed=5)
    b = tiny_params(seed=5)
    for name in a.tensors:
        assert np.array_equal(a.tensors[name], b.tensors[name])


def test_init_rejects_bad_heads():
    with pytest.raises(ConfigError):
        encoder.init_encoder(1, 3, 4, 8, seed=0)
    with pytest.raises(ConfigError):
        encoder.init_encoder(1, 8, 4, 8, seed=0)  # heads > width


def test_parameter_count_matches_enumeration():
    params = encoder.init_encoder(2, 2, 64, 50, seed=1)
    enumerated = sum(t.size for t in params.tensors.values())
    assert enumerated == encoder.parameter_count(2, 2, 64, 50)
    # and for a second shape
    params = tiny_params()
    assert sum(t.size for t in params.tensors.values()) == \
        encoder.parameter_count(1, 1, 4, 4)


# -- forward ------------------------------------------------------------------

def test_zero_layers_returns_input_plus_position():
    params = encoder.init_encoder(0, 1, 4, 4, seed=2)
    rep = np.asarray([[0.3, -0.2, 0.5, 0.1]])
    out = encoder.encode_sequence(params, rep, 1)
    assert np.allclose(out, rep[0] + params.tensors["positions"][0],
                       atol=1e-15)


def test_output_read_at_last_valid_position():
    params = encoder.init_encoder(0, 1, 4, 8, seed=3)
    rng = np.random.default_rng(0)
    reps = rng.standard_normal((3, 4))
    out = encoder.encode_sequence(params, reps, 3)
    assert np.allclose(out, reps[2] + params.tensors["positions"][2],
                       atol=1e-15)


def test_causality_under_padding():
    # a batched row padded past its valid length must match the unpadded run
    params = tiny_params(n_layers=2, n_heads=2, d_model=8, n_max=6)
    rng = np.random.default_rng(1)
    reps = rng.standard_normal((3, 8))
    single = encoder.encode_sequence(params, reps, 3)
    padded = np.zeros((1, 6, 8))
    padded[0, :3] = reps
    padded[0, 3:] = rng.standard_normal((3, 8))  # garbage after valid_len
    batched, _ = encoder.forward_batch(params, padded, np.asarray([3]))
    assert np.allclose(single, batched[0], atol=1e-12)


def test_causality_prefix_invariance():
    # hidden state at position t ignores perturbations at positions > t
    params = tiny_params(n_layers=2, n_heads=1, d_model=4, n_max=5)
    rng = np.random.default_rng(2)
    reps = rng.standard_normal((5, 4))
    prefix = encoder.encode_sequence(params, reps[:2], 2)
    reps2 = reps.copy()
    reps2[3:] += rng.standard_normal((2, 4))
    prefix2 = encoder.encode_sequence(params, reps2[:2], 2)
    assert np.array_equal(prefix, prefix2)


def test_determinism_bitwise():
    params = tiny_params(n_layers=2, n_heads=2, d_model=8, n_max=6, seed=9)
    rng = np.random.default_rng(3)
    reps = rng.standard_normal((1, 5, 8))
    lengths = np.asarray([5])
    a, _ = encoder.forward_batch(params, reps, lengths)
    b, _ = encoder.forward_batch(params, reps, lengths)
    assert np.array_equal(a, b)


def test_permutation_sensitivity():
    params = tiny_params(n_layers=1, n_heads=1, d_model=4, n_max=4, seed=4)
    rng = np.random.default_rng(5)
    reps = rng.standard_normal((3, 4))
    swapped = reps[[1, 0, 2]]
    out_a = encoder.encode_sequence(params, reps, 3)
    out_b = encoder.encode_sequence(params, swapped, 3)
    assert np.abs(out_a - out_b).max() > 1e-6


def test_valid_len_out_of_range():
    params = tiny_params()
    with pytest.raises(ValueError):
        encoder.encode_sequence(params, np.zeros((5, 4)), 5)  # > n_max
    with pytest.raises(ValueError):
        encoder.encode_sequence(params, np.zeros((0, 4)), 0)


# -- straight-line reference oracle -------------------------------------------

def reference_forward(params, reps):
    """Dense single-sequence re-computation, independent of encoder.py."""
    t = params.tensors
    d = params.d_model
    h = params.n_heads
    dh = d // h
    n = reps.shape[0]
    x = reps + t["positions"][:n]

    def layer_norm(v, g, b):
        mu = v.mean()
        var = ((v - mu) ** 2).mean()
        return g * (v - mu) / math.sqrt(var + 1e-8) + b

    def gelu(v):
        c = math.sqrt(2.0 / math.pi)
        return 0.5 * v * (1.0 + np.tanh(c * (v + 0.044715 * v ** 3)))

    for i in range(params.n_layers):
        p = f"layer{i}"
        hn = np.stack([layer_norm(x[j], t[f"{p}.attn_norm.gain"],
                                  t[f"{p}.attn_norm.bias"]) for j in range(n)])
        q = hn @ t[f"{p}.attn.wq"] + t[f"{p}.attn.bq"]
        k = hn @ t[f"{p}.attn.wk"] + t[f"{p}.attn.bk"]
        v = hn @ t[f"{p}.attn.wv"] + t[f"{p}.attn.bv"]
        ctx = np.zeros((n, d))
        for head in range(h):
            sl = slice(head * dh, (head + 1) * dh)
            for j in range(n):
                logits = np.asarray([q[j, sl] @ k[m, sl] / math.sqrt(dh)
                                     for m in range(j + 1)])
                weights = np.exp(logits - logits.max())
                weights /= weights.sum()
                ctx[j, sl] = sum(weights[m] * v[m, sl] for m in range(j + 1))
        x = x + ctx @ t[f"{p}.attn.wo"] + t[f"{p}.attn.bo"]
        h2 = np.stack([layer_norm(x[j], t[f"{p}.ffn_norm.gain"],
                                  t[f"{p}.ffn_norm.bias"]) for j in range(n)])
        u = h2 @ t[f"{p}.ffn.w1"] + t[f"{p}.ffn.b1"]
        x = x + gelu(u) @ t[f"{p}.ffn.w2"] + t[f"{p}.ffn.b2"]
    return x[n - 1]


def test_forward_matches_reference_oracle():
    params = tiny_params(n_layers=1, n_heads=1, d_model=4, n_max=4, seed=6)
    rng = np.random.default_rng(7)
    reps = rng.standard_normal((3, 4))
    ours = encoder.encode_sequence(params, reps, 3)
    assert np.allclose(ours, reference_forward(params, reps), atol=1e-12)


def test_forward_matches_reference_oracle_multihead():
    params = tiny_params(n_layers=2, n_heads=2, d_model=8, n_max=5, seed=8)
    rng = np.random.default_rng(9)
    reps = rng.standard_normal((4, 8))
    ours = encoder.encode_sequence(params, reps, 4)
    assert np.allclose(ours, reference_forward(params, reps), atol=1e-12)


# -- gradients ----------------------------------------------------------------

def test_zero_upstream_gradient_gives_zero_grads():
    params = tiny_params()
    rng = np.random.default_rng(10)
    reps = rng.standard_normal((3, 4))
    _, grads, dreps = encoder.encode_sequence_with_grad(
        params, reps, 3, np.zeros(4))
    assert np.array_equal(dreps, np.zeros_like(reps))
    for g in grads.values():
        assert not np.any(g)


def test_gradient_zero_past_valid_len():
    params = tiny_params(n_layers=1, n_heads=1, d_model=4, n_max=5)
    rng = np.random.default_rng(11)
    reps = rng.standard_normal((1, 5, 4))
    lengths = np.asarray([3])
    _, cache = encoder.forward_batch(params, reps, lengths)
    _, dreps = encoder.backward_batch(params, cache,
                                      rng.standard_normal((1, 4)))
    assert np.array_equal(dreps[0, 3:], np.zeros((2, 4)))
    assert np.any(dreps[0, :3])


def test_gradients_match_finite_differences():
    params = tiny_params(n_layers=1, n_heads=1, d_model=4, n_max=4, seed=12)
    rng = np.random.default_rng(13)
    reps = rng.standard_normal((3, 4))
    upstream = rng.standard_normal(4)

    _, grads, dreps = encoder.encode_sequence_with_grad(params, reps, 3,
                                                        upstream)

    def loss_for_reps(r):
        return float(upstream @ encoder.encode_sequence(params, r, 3))

    fd_reps = central_diff(loss_for_reps, reps.copy())
    assert max_rel_error(dreps, fd_reps) < 1e-4

    for name in params.tensors:
        def loss_for_param(_arr, _name=name):
            return float(upstream @ encoder.encode_sequence(params, reps, 3))

        fd = central_diff(loss_for_param, params.tensors[name])
        assert max_rel_error(grads[name], fd) < 1e-4, name


def test_multihead_gradients_match_finite_differences():
    params = tiny_params(n_layers=2, n_heads=2, d_model=4, n_max=3, seed=14)
    rng = np.random.default_rng(15)
    reps = rng.standard_normal((3, 4))
    upstream = rng.standard_normal(4)
    _, grads, _ = encoder.encode_sequence_with_grad(params, reps, 3, upstream)
    for name in ("layer0.attn.wq", "layer1.ffn.w1", "positions",
                 "layer1.attn_norm.gain"):
        def loss(_arr, _name=name):
            return float(upstream @ encoder.encode_sequence(params, reps, 3))

        fd = central_diff(loss, params.tensors[name])
        assert max_rel_error(grads[name], fd) < 1e-4, name


def test_batched_backward_accumulates_over_rows():
    params = tiny_params(n_layers=1, n_heads=1, d_model=4, n_max=4, seed=16)
    rng = np.random.default_rng(17)
    reps = rng.standard_normal((2, 3, 4))
    lengths = np.asarray([3, 2])
    reps[1, 2:] = 0.0
    dy = rng.standard_normal((2, 4))
    _, cache = encoder.forward_batch(params, reps, lengths)
    grads, dreps = encoder.backward_batch(params, cache, dy)

    total = {name: np.zeros_like(t) for name, t in params.tensors.items()}
    for b in range(2):
        _, g, dr = encoder.encode_sequence_with_grad(
            params, reps[b, :lengths[b]], int(lengths[b]), dy[b])
        for name in total:
            total[name] += g[name]
        assert np.allclose(dreps[b, :lengths[b]], dr, atol=1e-12)
    for name in total:
        assert np.allclose(grads[name], total[name], atol=1e-12), name


def test_dropout_switch_changes_output_and_respects_rng():
    params = tiny_params(n_layers=1, n_heads=1, d_model=4, n_max=4, seed=18)
    rng = np.random.default_rng(19)
    reps = rng.standard_normal((1, 3, 4))
    lengths = np.asarray([3])
    clean, _ = encoder.forward_batch(params, reps, lengths)
    noisy_a, _ = encoder.forward_batch(params, reps, lengths, dropout=0.5,
                                       rng=np.random.default_rng(7))
    noisy_b, _ = encoder.forward_batch(params, reps, lengths, dropout=0.5,
                                       rng=np.random.default_rng(7))
    assert np.array_equal(noisy_a, noisy_b)
    assert not np.allclose(clean, noisy_a)
