"""Shared-weight transformer blocks over the two modality streams."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .ami import ami_forward, init_ami


def init_block(params: T.Params, prefix: str, dim: int, rng):
    std = 0.02
    for k in ("q", "k", "v", "o"):
        params.add(f"{prefix}.msa.w{k}", rng.normal(0, std, (dim, dim)))
        params.add(f"{prefix}.msa.b{k}", np.zeros(dim))
    for i in (1, 2):
        params.add(f"{prefix}.ln{i}.g", np.ones(dim))
        params.add(f"{prefix}.ln{i}.b", np.zeros(dim))
    params.add(f"{prefix}.mlp.w1", rng.normal(0, std, (dim, 4 * dim)))
    params.add(f"{prefix}.mlp.b1", np.zeros(4 * dim))
    params.add(f"{prefix}.mlp.w2", rng.normal(0, std, (4 * dim, dim)))
    params.add(f"{prefix}.mlp.b2", np.zeros(dim))


def init_encoder(params: T.Params, cfg, rng):
    for l in range(1, cfg.layers + 1):
        init_block(params, f"encoder.block{l}", cfg.dim, rng)
    # independent AMI parameters per insertion point
    for l in cfg.ami_layers:
        init_ami(params, f"encoder.ami{l}", cfg.dim, cfg.n_tokens, rng, cfg.ami_variant)


def msa(x, bp, heads):
    q = T.linear(x, bp["msa.wq"], bp["msa.bq"])
    k = T.linear(x, bp["msa.wk"], bp["msa.bk"])
    v = T.linear(x, bp["msa.wv"], bp["msa.bv"])
    return T.linear(T.attention(q, k, v, heads), bp["msa.wo"], bp["msa.bo"])


def mlp(x, bp):
    return T.linear(T.gelu(T.linear(x, bp["mlp.w1"], bp["mlp.b1"])), bp["mlp.w2"], bp["mlp.b2"])


def block_forward(h, bp, heads=2) -> T.Tensor:
    """Pre-norm block: h = H + MSA(LN(H)); out = h + MLP(LN(h))."""
    h = T.tensor(h)
    dim = bp["ln1.g"].shape[0]
    if h.shape[-1] != dim:
        raise ValueError(f"block_forward: tokens have {h.shape[-1]} channels, block expects {dim}")
    h = h + msa(T.layer_norm(h, bp["ln1.g"], bp["ln1.b"]), bp, heads)
    return h + mlp(T.layer_norm(h, bp["ln2.g"], bp["ln2.b"]), bp)


def encode_pair(h_r, h_x, cfg, params: T.Params, record=None):
    """Run both streams through the shared blocks with AMI after ``cfg.ami_layers``.

    The streams are stacked along a leading axis so each block runs once with
    one parameter set. AMI updates are simultaneous: both deltas are computed
    from the pre-update streams. ``record`` collects per-layer A / B_w arrays.
    """
    h_r, h_x = T.tensor(h_r), T.tensor(h_x)
    if h_r.shape != h_x.shape:
        raise ValueError(f"encode_pair: stream shapes differ {h_r.shape} vs {h_x.shape}")
    single = h_r.ndim == 2
    if single:
        h_r, h_x = T.reshape(h_r, (1,) + h_r.shape), T.reshape(h_x, (1,) + h_x.shape)
    b = h_r.shape[0]
    h = T.concat([h_r, h_x], axis=0)
    ami_set = set(cfg.ami_layers)
    for l in range(1, cfg.layers + 1):
        h = block_forward(h, params.subset(f"encoder.block{l}"), cfg.heads)
        if l in ami_set:
            other = T.concat([h[b:], h[:b]], axis=0)
            rec = [] if record is not None else None
            delta = ami_forward(h, other, params.subset(f"encoder.ami{l}"),
                                cfg.ami_heads, cfg.ami_variant, rec)
            if record is not None and rec:
                record.append((l, rec[0]))
            h = h + delta
    out_r, out_x = h[:b], h[b:]
    if single:
        out_r, out_x = out_r[0], out_x[0]
    return out_r, out_x
