"""Patch tokenization with one projection and one positional table for both modalities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass
class FramePair:
    rgb: np.ndarray
    x_mod: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        if self.rgb.shape != self.x_mod.shape:
            raise ValueError(f"FramePair: rgb {self.rgb.shape} and x {self.x_mod.shape} differ")
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError(f"FramePair: expected HxWx3 images, got {self.rgb.shape}")


@dataclass
class TokenSeq:
    tokens: T.Tensor  # (..., N, C)
    n_template: int
    n_search: int

    def __post_init__(self):
        if self.tokens.shape[-2] != self.n_template + self.n_search:
            raise ValueError("TokenSeq: token count does not match template + search partition")

    @property
    def search(self) -> T.Tensor:
        return self.tokens[..., self.n_template:, :]


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """Split (..., H, W, 3) into row-major patches of shape (..., H/P * W/P, 3*P*P).

    Each row flattens one P x P x 3 block in (row, column, channel) order.
    """
    image = np.asarray(image, dtype=np.float64)
    *lead, h, w, c = image.shape
    if h % patch:
        raise ValueError(f"patchify: height {h} not divisible by patch {patch}")
    if w % patch:
        raise ValueError(f"patchify: width {w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = image.reshape(*lead, gh, patch, gw, patch, c)
    r = len(lead)
    x = x.transpose(*range(r), r, r + 2, r + 1, r + 3, r + 4)
    return x.reshape(*lead, gh * gw, patch * patch * c)


def unpatchify(patches: np.ndarray, patch: int, h: int, w: int) -> np.ndarray:
    *lead, n, d = patches.shape
    c = d // (patch * patch)
    gh, gw = h // patch, w // patch
    r = len(lead)
    x = patches.reshape(*lead, gh, gw, patch, patch, c)
    x = x.transpose(*range(r), r, r + 2, r + 1, r + 3, r + 4)
    return x.reshape(*lead, h, w, c)


def init_embed(params: T.Params, cfg, rng, prefix="embed"):
    d_in = 3 * cfg.patch ** 2
    params.add(f"{prefix}.proj", rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, cfg.dim)))
    params.add(f"{prefix}.proj_b", np.zeros(cfg.dim))
    params.add(f"{prefix}.pos", rng.normal(0.0, 0.02, size=(cfg.n_total, cfg.dim)))


def embed_modality(t_init, t_dyn, search, ep: T.Params, patch: int) -> TokenSeq:
    """Tokens = [init-template patches; dynamic-template patches; search patches] E + p.

    ``ep`` holds ``proj``, ``proj_b`` and ``pos``; the same entries serve both
    modalities. Images may carry a leading batch axis.
    """
    pt = np.concatenate([patchify(t_init, patch), patchify(t_dyn, patch)], axis=-2)
    ps = patchify(search, patch)
    n1, n2 = pt.shape[-2], ps.shape[-2]
    pos = ep["pos"]
    if pos.shape[0] != n1 + n2:
        raise ValueError(f"positional embedding has {pos.shape[0]} rows, need {n1 + n2}")
    raw = np.concatenate([pt, ps], axis=-2)
    tok = T.matmul(T.Tensor(raw), ep["proj"])
    if "proj_b" in ep:
        tok = tok + ep["proj_b"]
    return TokenSeq(tok + pos, n1, n2)
