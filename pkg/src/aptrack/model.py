"""Full network: shared embedding, shared encoder with AMI, and the head."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .embed import embed_modality, init_embed
from .encoder import encode_pair, init_encoder
from .head import init_head, predict


def init_params(cfg, seed=None) -> T.Params:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = T.Params()
    init_embed(params, cfg, rng)
    init_encoder(params, cfg, rng)
    init_head(params, cfg, rng)
    return params


def is_ami_param(name: str) -> bool:
    return name.startswith("encoder.ami")


def forward(params: T.Params, cfg, rgb, xmod, record=None):
    """Run the network on template/search crops of both modalities.

    ``rgb`` and ``xmod`` are (t_init, t_dyn, search) image triples, each image
    (H, W, 3) or batched (B, H, W, 3).
    """
    ep = params.subset("embed")
    seq_r = embed_modality(*rgb, ep, cfg.patch)
    seq_x = embed_modality(*xmod, ep, cfg.patch)
    h_r, h_x = encode_pair(seq_r.tokens, seq_x.tokens, cfg, params, record)
    n1 = seq_r.n_template
    return predict(h_r[..., n1:, :], h_x[..., n1:, :], params.subset("head"))


def check_gradients(cfg, seed=0, batch=2, max_entries=None, params=None):
    """Finite-difference check of total_loss through the whole network.

    Random crops and boxes are drawn from ``seed``; returns the max relative error.
    """
    from .head import LossWeights, total_loss

    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed) if params is None else params
    t, s = cfg.template_size, cfg.search_size

    def crops():
        return (rng.random((batch, t, t, 3)), rng.random((batch, t, t, 3)), rng.random((batch, s, s, 3)))

    rgb, xm = crops(), crops()
    gts = np.c_[rng.uniform(0.25, 0.75, (batch, 2)) * s, rng.uniform(0.1, 0.4, (batch, 2)) * s]
    weights = LossWeights(cfg.lambda_l1, cfg.lambda_giou)

    def f(p):
        return total_loss(forward(p, cfg, rgb, xm), gts, s, weights)

    return T.grad_check(f, params, max_entries=max_entries, seed=seed)
