"""Causal self-attentive sequence encoder with exact reverse-mode gradients.

The architecture is the usual next-item backbone: learned absolute position
embeddings added to the item representations, then L pre-norm blocks of
multi-head causal self-attention and a GELU feed-forward, each wrapped in a
residual connection. There is no final layer norm, so with zero layers the
output is exactly the input at the last valid position. Forward and backward
are written directly in numpy so gradients are exact and reproducible; all
computations follow the dtype of the parameters (float64 by default).

Parameter tensors live in an ordered dict under documented keys; the flat
order is the serialization order. Total parameter count is
n_max*d + L*(12*d^2 + 13*d), see parameter_count().
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

LN_EPS = 1e-8
INIT_STD = 0.02
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@dataclass
class SequenceEncoderParams:
    n_layers: int
    n_heads: int
    d_model: int
    n_max: int
    tensors: OrderedDict = field(default_factory=OrderedDict)

    def copy(self):
        return SequenceEncoderParams(
            self.n_layers, self.n_heads, self.d_model, self.n_max,
            OrderedDict((k, v.copy()) for k, v in self.tensors.items()))

    @property
    def dtype(self):
        return self.tensors["positions"].dtype

    def astype(self, dtype):
        out = self.copy()
        for k in out.tensors:
            out.tensors[k] = out.tensors[k].astype(dtype)
        return out


def tensor_shapes(n_layers, n_heads, d_model, n_max):
    """Ordered (name, shape) pairs of every parameter tensor."""
    d = d_model
    shapes = [("positions", (n_max, d))]
    for i in range(n_layers):
        p = f"layer{i}"
        shapes += [
            (f"{p}.attn_norm.gain", (d,)), (f"{p}.attn_norm.bias", (d,)),
            (f"{p}.attn.wq", (d, d)), (f"{p}.attn.bq", (d,)),
            (f"{p}.attn.wk", (d, d)), (f"{p}.attn.bk", (d,)),
            (f"{p}.attn.wv", (d, d)), (f"{p}.attn.bv", (d,)),
            (f"{p}.attn.wo", (d, d)), (f"{p}.attn.bo", (d,)),
            (f"{p}.ffn_norm.gain", (d,)), (f"{p}.ffn_norm.bias", (d,)),
            (f"{p}.ffn.w1", (d, 4 * d)), (f"{p}.ffn.b1", (4 * d,)),
            (f"{p}.ffn.w2", (4 * d, d)), (f"{p}.ffn.b2", (d,)),
        ]
    return shapes


def parameter_count(n_layers, n_heads, d_model, n_max):
    """Closed-form total parameter count of the encoder."""
    d = d_model
    return n_max * d + n_layers * (12 * d * d + 13 * d)


def init_encoder(n_layers, n_heads, d_model, n_max, seed, dtype=np.float64):
    """Gaussian(0, 0.02) weights, zero biases, unit layer-norm gains."""
    if n_layers < 0 or n_heads < 1 or d_model < 1 or n_max < 1:
        raise ConfigError("encoder dimensions must be positive")
    if d_model % n_heads != 0:
        raise ConfigError(
            f"d_model {d_model} is not divisible by {n_heads} heads")
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for name, shape in tensor_shapes(n_layers, n_heads, d_model, n_max):
        if name.endswith(".gain"):
            t = np.ones(shape)
        elif name.endswith((".bias", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
            t = np.zeros(shape)
        else:
            t = rng.normal(0.0, INIT_STD, size=shape)
        tensors[name] = t.astype(dtype, copy=False)
    return SequenceEncoderParams(n_layers, n_heads, d_model, n_max, tensors)


def _gelu(x):
    # tanh formulation; its analytic derivative lives in _gelu_grad
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x * x * x)))


def _gelu_grad(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (
        1.0 + 3.0 * _GELU_A * x * x)


def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return gain * xhat + bias, (xhat, inv)


def _layer_norm_backward(dout, gain, cache):
    xhat, inv = cache
    d = xhat.shape[-1]
    dgain = (dout * xhat).sum(axis=tuple(range(dout.ndim - 1)))
    dbias = dout.sum(axis=tuple(range(dout.ndim - 1)))
    dxhat = dout * gain
    dx = inv / d * (d * dxhat
                    - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx, dgain, dbias


def _split_heads(x, n_heads):
    b, n, d = x.shape
    return x.reshape(b, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def forward_batch(params, reps, lengths, dropout=0.0, rng=None):
    """Encode a padded batch; returns ((B, d) outputs, cache for backward).

    reps has shape (B, n, d) with zeros past each row's length; the output
    row b is the top-layer hidden state at position lengths[b]-1. Dropout is
    applied to the attention and feed-forward branches before their residual
    additions, only when a rate and rng are supplied.
    """
    t = params.tensors
    reps = np.asarray(reps, dtype=params.dtype)
    b, n, d = reps.shape
    if d != params.d_model:
        raise ValueError(f"expected width {params.d_model}, got {d}")
    if n > params.n_max:
        raise ValueError(f"sequence length {n} exceeds n_max {params.n_max}")
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.min() < 1 or lengths.max() > n:
        raise ValueError("lengths must lie in [1, n]")

    h = params.n_heads
    dh = d // h
    scale = 1.0 / math.sqrt(dh)
    mask = np.triu(np.full((n, n), -np.inf, dtype=params.dtype), k=1)
    use_dropout = dropout > 0.0 and rng is not None
    keep = 1.0 - dropout

    def project(inp, w, bias):
        # single dgemm over the flattened batch*position axis
        return (inp.reshape(-1, d) @ w + bias).reshape(b, n, d)

    x = reps + t["positions"][:n]
    layer_caches = []
    for i in range(params.n_layers):
        p = f"layer{i}"
        x_in = x
        hn, ln1_cache = _layer_norm(x_in, t[f"{p}.attn_norm.gain"],
                                    t[f"{p}.attn_norm.bias"])
        q = _split_heads(project(hn, t[f"{p}.attn.wq"], t[f"{p}.attn.bq"]), h)
        k = _split_heads(project(hn, t[f"{p}.attn.wk"], t[f"{p}.attn.bk"]), h)
        v = _split_heads(project(hn, t[f"{p}.attn.wv"], t[f"{p}.attn.bv"]), h)
        scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale + mask
        scores -= scores.max(axis=-1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=-1, keepdims=True)
        ctx = _merge_heads(np.matmul(attn, v))
        branch = project(ctx, t[f"{p}.attn.wo"], t[f"{p}.attn.bo"])
        attn_drop = None
        if use_dropout:
            attn_drop = (rng.random(branch.shape) < keep) / keep
            branch = branch * attn_drop
        x_mid = x_in + branch

        h2, ln2_cache = _layer_norm(x_mid, t[f"{p}.ffn_norm.gain"],
                                    t[f"{p}.ffn_norm.bias"])
        u = (h2.reshape(-1, d) @ t[f"{p}.ffn.w1"]
             + t[f"{p}.ffn.b1"]).reshape(b, n, 4 * d)
        a = _gelu(u)
        f = (a.reshape(-1, 4 * d) @ t[f"{p}.ffn.w2"]
             + t[f"{p}.ffn.b2"]).reshape(b, n, d)
        ffn_drop = None
        if use_dropout:
            ffn_drop = (rng.random(f.shape) < keep) / keep
            f = f * ffn_drop
        x = x_mid + f
        layer_caches.append((hn, ln1_cache, q, k, v, attn, ctx, attn_drop,
                             x_mid, h2, ln2_cache, u, a, ffn_drop))

    y = x[np.arange(b), lengths - 1]
    cache = (reps.shape, lengths, mask.shape[0], layer_caches)
    return y, cache


def backward_batch(params, cache, dy):
    """Gradients of sum_b dy[b] . y[b] w.r.t. parameters and input reps."""
    t = params.tensors
    (b, n, d), lengths, _, layer_caches = cache
    h = params.n_heads
    dh = d // h
    scale = 1.0 / math.sqrt(dh)

    grads = OrderedDict((name, np.zeros_like(arr)) for name, arr in t.items())
    dx = np.zeros((b, n, d), dtype=params.dtype)
    dx[np.arange(b), lengths - 1] = np.asarray(dy, dtype=params.dtype)

    def outer(lhs, rhs):
        # (B, n, p)^T (B, n, q) contracted over batch and position via dgemm
        return lhs.reshape(-1, lhs.shape[-1]).T @ rhs.reshape(-1, rhs.shape[-1])

    def apply_t(mat, w):
        # (B, n, p) @ w.T as one dgemm
        return (mat.reshape(-1, mat.shape[-1]) @ w.T).reshape(
            mat.shape[0], mat.shape[1], -1)

    for i in reversed(range(params.n_layers)):
        p = f"layer{i}"
        (hn, ln1_cache, q, k, v, attn, ctx, attn_drop,
         x_mid, h2, ln2_cache, u, a, ffn_drop) = layer_caches[i]

        df = dx.copy()
        if ffn_drop is not None:
            df *= ffn_drop
        grads[f"{p}.ffn.b2"] += df.sum(axis=(0, 1))
        grads[f"{p}.ffn.w2"] += outer(a, df)
        da = apply_t(df, t[f"{p}.ffn.w2"])
        du = da * _gelu_grad(u)
        grads[f"{p}.ffn.b1"] += du.sum(axis=(0, 1))
        grads[f"{p}.ffn.w1"] += outer(h2, du)
        dh2 = apply_t(du, t[f"{p}.ffn.w1"])
        dx_mid, dgain2, dbias2 = _layer_norm_backward(
            dh2, t[f"{p}.ffn_norm.gain"], ln2_cache)
        grads[f"{p}.ffn_norm.gain"] += dgain2
        grads[f"{p}.ffn_norm.bias"] += dbias2
        dx = dx + dx_mid

        dbranch = dx.copy()
        if attn_drop is not None:
            dbranch *= attn_drop
        grads[f"{p}.attn.bo"] += dbranch.sum(axis=(0, 1))
        grads[f"{p}.attn.wo"] += outer(ctx, dbranch)
        dctx = _split_heads(apply_t(dbranch, t[f"{p}.attn.wo"]), h)
        dattn = np.matmul(dctx, v.transpose(0, 1, 3, 2))
        dv = np.matmul(attn.transpose(0, 1, 3, 2), dctx)
        dscores = attn * (dattn
                          - (dattn * attn).sum(axis=-1, keepdims=True))
        dq = np.matmul(dscores, k) * scale
        dk = np.matmul(dscores.transpose(0, 1, 3, 2), q) * scale
        dhn = np.zeros_like(hn)
        for name, dmat in (("wq", dq), ("wk", dk), ("wv", dv)):
            dflat = _merge_heads(dmat)
            grads[f"{p}.attn.b{name[1]}"] += dflat.sum(axis=(0, 1))
            grads[f"{p}.attn.{name}"] += outer(hn, dflat)
            dhn += apply_t(dflat, t[f"{p}.attn.{name}"])
        dx_in, dgain1, dbias1 = _layer_norm_backward(
            dhn, t[f"{p}.attn_norm.gain"], ln1_cache)
        grads[f"{p}.attn_norm.gain"] += dgain1
        grads[f"{p}.attn_norm.bias"] += dbias1
        dx = dx + dx_in

    grads["positions"][:n] += dx.sum(axis=0)
    return grads, dx


def encode_sequence(params, item_reps, valid_len):
    """Top-layer hidden state at position valid_len-1 for one sequence."""
    reps, lengths = _single(params, item_reps, valid_len)
    y, _ = forward_batch(params, reps, lengths)
    return y[0]


def encode_sequence_with_grad(params, item_reps, valid_len, upstream_grad):
    """Sequence representation plus exact gradients of upstream_grad . output.

    Returns (representation, parameter gradients, gradients w.r.t. the
    input item representations).
    """
    reps, lengths = _single(params, item_reps, valid_len)
    y, cache = forward_batch(params, reps, lengths)
    grads, dreps = backward_batch(params, cache,
                                  np.asarray(upstream_grad)[None, :])
    return y[0], grads, dreps[0]


def _single(params, item_reps, valid_len):
    reps = np.asarray(item_reps, dtype=params.dtype)
    if reps.ndim != 2 or reps.shape[1] != params.d_model:
        raise ValueError(
            f"expected (valid_len, {params.d_model}) item reps, got {reps.shape}")
    if not 1 <= valid_len <= params.n_max:
        raise ValueError(f"valid_len {valid_len} outside [1, {params.n_max}]")
    if reps.shape[0] != valid_len:
        raise ValueError("item_reps length must equal valid_len")
    return reps[None, :, :], np.asarray([valid_len], dtype=np.int64)
