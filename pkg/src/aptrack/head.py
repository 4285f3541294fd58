"""Anchor-free prediction head, box decoding and the training loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

EPS = 1e-7
FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0


@dataclass
class BBox:
    """Axis-aligned box given by its center and extent, in pixels."""
    x: float
    y: float
    w: float
    h: float
    score: float | None = None

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"BBox extents must be positive, got w={self.w} h={self.h}")

    @classmethod
    def from_xywh(cls, left, top, w, h, score=None):
        return cls(left + w / 2.0, top + h / 2.0, w, h, score)

    def to_xywh(self):
        return (self.x - self.w / 2.0, self.y - self.h / 2.0, self.w, self.h)

    def corners(self):
        return (self.x - self.w / 2.0, self.y - self.h / 2.0,
                self.x + self.w / 2.0, self.y + self.h / 2.0)

    def as_array(self):
        return np.array([self.x, self.y, self.w, self.h])


@dataclass
class LossWeights:
    l1: float = 5.0
    giou: float = 2.0

    def __post_init__(self):
        if self.l1 < 0 or self.giou < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class HeadOutput:
    score: T.Tensor   # (..., G, G)
    offset: T.Tensor  # (..., 2, G, G), cell units
    size: T.Tensor    # (..., 2, G, G), cell units


def init_head(params: T.Params, cfg, rng, prefix="head"):
    c2, hid = 2 * cfg.dim, cfg.head_hidden
    for name, n_out in (("cls", 1), ("off", 2), ("size", 2)):
        params.add(f"{prefix}.{name}.w1", rng.normal(0, 1.0 / np.sqrt(c2), (c2, hid)))
        params.add(f"{prefix}.{name}.b1", np.zeros(hid))
        params.add(f"{prefix}.{name}.w2", rng.normal(0, 1.0 / np.sqrt(hid), (hid, n_out)))
        params.add(f"{prefix}.{name}.b2", np.zeros(n_out))
    # focal-loss prior: start with low foreground probability
    params[f"{prefix}.cls.b2"].data[:] = -2.0


def _stack(x, hp, name):
    return T.linear(T.gelu(T.linear(x, hp[f"{name}.w1"], hp[f"{name}.b1"])),
                    hp[f"{name}.w2"], hp[f"{name}.b2"])


def predict(search_r, search_x, hp: T.Params) -> HeadOutput:
    """Channel-concatenate the two search maps and run the three per-location stacks.

    Inputs are (..., G*G, C) search tokens in row-major grid order.
    """
    search_r, search_x = T.tensor(search_r), T.tensor(search_x)
    if search_r.shape != search_x.shape:
        raise ValueError(f"predict: search maps differ {search_r.shape} vs {search_x.shape}")
    n = search_r.shape[-2]
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise ValueError(f"predict: {n} search tokens do not form a square grid")
    lead = search_r.shape[:-2]
    feat = T.concat([search_r, search_x], axis=-1)
    r = len(lead)

    def to_maps(t, k):
        # (..., G*G, k) -> (..., k, G, G)
        t = T.reshape(t, lead + (g, g, k))
        return T.transpose(t, tuple(range(r)) + (r + 2, r, r + 1))

    score = T.sigmoid(T.reshape(_stack(feat, hp, "cls"), lead + (g, g)))
    offset = to_maps(T.sigmoid(_stack(feat, hp, "off")), 2)
    size = to_maps(T.sigmoid(_stack(feat, hp, "size")) * float(g), 2)
    return HeadOutput(score, offset, size)


def _np(a):
    return a.data if isinstance(a, T.Tensor) else np.asarray(a, dtype=np.float64)


def decode_box(ho: HeadOutput, stride: float) -> BBox:
    """Box at the peak of the score map (first cell in row-major order on ties)."""
    p = _np(ho.score)
    o, s = _np(ho.offset), _np(ho.size)
    flat = int(np.argmax(p.reshape(-1)))
    yd, xd = divmod(flat, p.shape[-1])
    x = (xd + o[0, yd, xd]) * stride
    y = (yd + o[1, yd, xd]) * stride
    w = max(s[0, yd, xd] * stride, 1e-6)
    h = max(s[1, yd, xd] * stride, 1e-6)
    return BBox(float(x), float(y), float(w), float(h), float(p[yd, xd]))


def gaussian_target(gt_cells, grid: int) -> np.ndarray:
    """Heatmap with 1 at each box's cell and a Gaussian falloff.

    ``gt_cells`` rows are (cx, cy, w, h) in cell units. The spread is one
    third of the box radius max(w, h) / 2, floored at 1/6 cell.
    """
    gt_cells = np.atleast_2d(gt_cells)
    yy, xx = np.mgrid[0:grid, 0:grid]
    out = np.empty((len(gt_cells), grid, grid))
    for i, (cx, cy, w, h) in enumerate(gt_cells):
        xd, yd = gt_cell(cx, cy, grid)
        sigma = max(max(w, h) / 2.0 / 3.0, 1.0 / 6.0)
        out[i] = np.exp(-((xx - xd) ** 2 + (yy - yd) ** 2) / (2 * sigma ** 2))
        out[i, yd, xd] = 1.0
    return out


def gt_cell(cx, cy, grid):
    return (int(np.clip(np.floor(cx), 0, grid - 1)), int(np.clip(np.floor(cy), 0, grid - 1)))


def focal_loss(p, target) -> T.Tensor:
    """Center-point focal loss, normalized by the number of positive cells.

    Leading axes are treated as a batch and averaged.
    """
    p = T.tensor(p)
    target = np.asarray(target, dtype=np.float64)
    if p.shape != target.shape:
        raise ValueError(f"focal_loss: prediction {p.shape} vs target {target.shape}")
    pc = T.clip(p, EPS, 1.0 - EPS)
    pos = (target == 1.0).astype(np.float64)
    neg_w = (1.0 - pos) * (1.0 - target) ** FOCAL_BETA
    pos_term = T.power(1.0 - pc, FOCAL_ALPHA) * T.log(pc) * pos
    neg_term = T.power(pc, FOCAL_ALPHA) * T.log(1.0 - pc) * neg_w
    total = -(pos_term + neg_term)
    if p.ndim <= 2:
        return T.sum(total) * (1.0 / max(pos.sum(), 1.0))
    axes = tuple(range(p.ndim - 2, p.ndim))
    n_pos = np.maximum(pos.sum(axis=axes), 1.0)
    per = T.sum(total, axis=axes) * (1.0 / n_pos)
    return T.mean(per)


def giou(pred, gt) -> T.Tensor:
    """Generalized IoU for (..., 4) center-format boxes; differentiable in ``pred``."""
    pred, gt = T.tensor(pred), T.tensor(gt)

    def corners(b):
        cx, cy, w, h = (b[..., i] for i in range(4))
        return cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5

    px1, py1, px2, py2 = corners(pred)
    gx1, gy1, gx2, gy2 = corners(gt)
    iw = T.maximum(T.minimum(px2, gx2) - T.maximum(px1, gx1), 0.0)
    ih = T.maximum(T.minimum(py2, gy2) - T.maximum(py1, gy1), 0.0)
    inter = iw * ih
    area_p = (px2 - px1) * (py2 - py1)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = area_p + area_g - inter
    cw = T.maximum(px2, gx2) - T.minimum(px1, gx1)
    ch = T.maximum(py2, gy2) - T.minimum(py1, gy1)
    enclose = cw * ch
    return inter / union - (enclose - union) / enclose


def giou_loss(pred: BBox, gt: BBox) -> float:
    return float(1.0 - giou(pred.as_array(), gt.as_array()).data)


def box_at_cells(ho: HeadOutput, cells) -> T.Tensor:
    """Normalized (cx, cy, w, h) read from the head maps at the given cells.

    ``cells`` is a list of (xd, yd), one per batch entry (or a single pair for
    unbatched output).
    """
    off, size = T.tensor(ho.offset), T.tensor(ho.size)
    g = off.shape[-1]
    batched = off.ndim == 4
    cells = list(cells) if batched else [cells]
    xs = np.array([c[0] for c in cells])
    ys = np.array([c[1] for c in cells])
    if batched:
        bi = np.arange(len(cells))
        o = off[bi, :, ys, xs]            # (B, 2)
        s = size[bi, :, ys, xs]
    else:
        o = T.reshape(off[:, ys, xs], (1, 2))
        s = T.reshape(size[:, ys, xs], (1, 2))
    base = np.stack([xs, ys], axis=-1).astype(np.float64)
    return T.concat([(o + base) * (1.0 / g), s * (1.0 / g)], axis=-1)


def total_loss(ho: HeadOutput, gt, search_size: float, weights: LossWeights = LossWeights(),
               parts: dict | None = None) -> T.Tensor:
    """focal + l1 * L1 + giou * (1 - GIoU), read at the ground-truth cell.

    ``gt`` is (cx, cy, w, h) in search-crop pixels, shape (4,) or (B, 4).
    """
    score = T.tensor(ho.score)
    g = score.shape[-1]
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    gt_n = gt / float(search_size)
    gt_c = gt_n * g
    cells = [gt_cell(cx, cy, g) for cx, cy, _, _ in gt_c]
    target = gaussian_target(gt_c, g)
    if score.ndim == 2:
        target = target[0]
    l_cls = focal_loss(score, target)
    box = box_at_cells(ho, cells if score.ndim == 3 else cells[0])
    l_l1 = T.mean(T.absolute(box - gt_n))
    l_giou = T.mean(1.0 - giou(box, gt_n))
    if parts is not None:
        parts.update(cls=float(l_cls.data), l1=float(l_l1.data), giou=float(l_giou.data))
    return l_cls + l_l1 * weights.l1 + l_giou * weights.giou
