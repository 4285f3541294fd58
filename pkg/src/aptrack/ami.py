"""Adaptive modality interaction: learnable tokens and the global modal perceptor.

The module compresses each stream to ``n_tokens`` convex summaries, lets the
two sets of summaries attend to each other, and spreads the result back over
every token position. The same parameters serve both call directions.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T


def init_ami(params: T.Params, prefix: str, dim: int, n_tokens: int, rng, variant="full"):
    std = 0.02
    use_tokens = n_tokens > 0 and variant != "gmp_only"
    if use_tokens:
        params.add(f"{prefix}.alpha_w", rng.normal(0, std, (dim, n_tokens)))
        params.add(f"{prefix}.alpha_b", np.zeros(n_tokens))
        params.add(f"{prefix}.be_w", rng.normal(0, std, (dim, n_tokens)))
        params.add(f"{prefix}.be_b", np.zeros(n_tokens))
    if variant != "lt_only":
        for k in "qkv":
            params.add(f"{prefix}.w{k}", rng.normal(0, 1.0 / np.sqrt(dim), (dim, dim)))
            params.add(f"{prefix}.b{k}", np.zeros(dim))
    params.add(f"{prefix}.fuse_w", rng.normal(0, std, (2 * dim, dim)))
    params.add(f"{prefix}.fuse_b", np.zeros(dim))


def learn_tokens(x, ap, record=None) -> T.Tensor:
    """F = softmax_N(X alpha)^T X; each learned token is a convex mix of input rows."""
    x = T.tensor(x)
    w = ap["alpha_w"]
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"learn_tokens: {x.shape[-1]} channels, alpha expects {w.shape[0]}")
    logits = T.linear(x, w, ap.get("alpha_b"))
    a = T.softmax(logits, axis=-2)
    if record is not None:
        record.append(a.data)
    return T.matmul(T.swapaxes(a, -1, -2), x)


def _qkv(f, ap):
    return (T.linear(f, ap["wq"], ap["bq"]),
            T.linear(f, ap["wk"], ap["bk"]),
            T.linear(f, ap["wv"], ap["bv"]))


def perceive(f_in, f_other, ap, heads=1) -> T.Tensor:
    """Fused Q-attention / KV-attention message for ``f_in`` (no residual)."""
    f_in, f_other = T.tensor(f_in), T.tensor(f_other)
    if f_in.shape != f_other.shape:
        raise ValueError(f"perceptor: token shapes differ {f_in.shape} vs {f_other.shape}")
    q, k, v = _qkv(f_in, ap)
    q2, k2, v2 = _qkv(f_other, ap)
    q_hat = (q + q2) * 0.5
    k_hat = T.concat([k, k2], axis=-2)
    v_hat = T.concat([v, v2], axis=-2)
    w_q = T.attention(q_hat, k, v, heads)
    w_kv = T.attention(q, k_hat, v_hat, heads)
    return T.linear(T.concat([w_q, w_kv], axis=-1), ap["fuse_w"], ap["fuse_b"])


def global_modal_perceptor(f_in, f_other, ap, heads=1) -> T.Tensor:
    return T.tensor(f_in) + perceive(f_in, f_other, ap, heads)


def exchange(f_in, f_other, ap) -> T.Tensor:
    """Attention-free exchange used when the perceptor is ablated."""
    f_in = T.tensor(f_in)
    return f_in + T.linear(T.concat([f_in, f_other], axis=-1), ap["fuse_w"], ap["fuse_b"])


def embed_tokens(h, f, ap, record=None) -> T.Tensor:
    """delta = B_w F with B_w = softmax over tokens of (H w_be); shape (..., N, C)."""
    h, f = T.tensor(h), T.tensor(f)
    w = ap["be_w"]
    if h.shape[-1] != w.shape[0] or f.shape[-2] != w.shape[1] or f.shape[-1] != h.shape[-1]:
        raise ValueError(f"embed_tokens: shapes H{h.shape} F{f.shape} w{w.shape} disagree")
    b = T.softmax(T.linear(h, w, ap.get("be_b")), axis=-1)
    if record is not None:
        record.append(b.data)
    return T.matmul(b, f)


def ami_forward(h_in, h_other, ap, heads=1, variant="full", record=None) -> T.Tensor:
    """Residual update for ``h_in`` given the other stream; the caller adds it.

    ``variant`` selects the ablation: ``full``, ``gmp_only`` (perceptor over
    all tokens, no token learning) or ``lt_only`` (token learning and
    embedding with a linear exchange instead of the perceptor). Parameters
    without ``alpha_w`` run as ``gmp_only``.
    """
    if h_in.shape != h_other.shape:
        raise ValueError(f"ami: stream shapes differ {h_in.shape} vs {h_other.shape}")
    if variant == "gmp_only" or "alpha_w" not in ap:
        return perceive(h_in, h_other, ap, heads)
    a_rec = [] if record is not None else None
    f_in = learn_tokens(h_in, ap, a_rec)
    f_other = learn_tokens(h_other, ap)
    if variant == "lt_only":
        f_new = exchange(f_in, f_other, ap)
    else:
        f_new = global_modal_perceptor(f_in, f_other, ap, heads)
    b_rec = [] if record is not None else None
    delta = embed_tokens(h_in, f_new, ap, b_rec)
    if record is not None:
        record.append({"A": a_rec[0], "B_w": b_rec[0]})
    return delta
