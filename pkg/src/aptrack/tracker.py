"""Training loop and dual-template inference."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .config import TrackerConfig
from .embed import FramePair
from .head import BBox, LossWeights, decode_box, total_loss
from .model import forward, init_params, is_ami_param

log = logging.getLogger(__name__)

MIN_EXTENT = 2.0


# ------------------------------------------------------------------ cropping

def crop_resize(img: np.ndarray, cx: float, cy: float, side: float, out: int) -> np.ndarray:
    """Square crop of ``side`` pixels centered at (cx, cy), bilinearly resized to ``out``.

    Output pixel j samples the frame at x0 + (j + 0.5) * side / out, with
    x0 = cx - side / 2. Samples beyond the frame take the frame's mean color.
    """
    h, w = img.shape[:2]
    scale = side / out
    pos = (np.arange(out) + 0.5) * scale
    us = cx - side / 2.0 + pos - 0.5
    vs = cy - side / 2.0 + pos - 0.5
    fill = img.reshape(-1, img.shape[2]).mean(axis=0)

    def axis(coords, n):
        c = np.clip(coords, 0, n - 1)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n - 1)
        return lo, hi, c - lo, (coords >= -0.5) & (coords <= n - 0.5)

    x_lo, x_hi, fx, okx = axis(us, w)
    y_lo, y_hi, fy, oky = axis(vs, h)
    fx, fy = fx[None, :, None], fy[:, None, None]
    top = img[y_lo][:, x_lo] * (1 - fx) + img[y_lo][:, x_hi] * fx
    bot = img[y_hi][:, x_lo] * (1 - fx) + img[y_hi][:, x_hi] * fx
    res = top * (1 - fy) + bot * fy
    mask = (oky[:, None] & okx[None, :])[..., None]
    return np.where(mask, res, fill)


def crop_origin(cx, cy, side):
    return cx - side / 2.0, cy - side / 2.0


def box_to_crop(box, cx, cy, side, out):
    """(cx, cy, w, h) frame box -> crop pixel coordinates."""
    x0, y0 = crop_origin(cx, cy, side)
    s = out / side
    return np.array([(box[0] - x0) * s, (box[1] - y0) * s, box[2] * s, box[3] * s])


def box_from_crop(box, cx, cy, side, out):
    x0, y0 = crop_origin(cx, cy, side)
    s = side / out
    return np.array([x0 + box[0] * s, y0 + box[1] * s, box[2] * s, box[3] * s])


def _side(w, h, factor):
    return factor * max(max(w, MIN_EXTENT), max(h, MIN_EXTENT))


def crop_template(fp: FramePair, box, cfg):
    side = _side(box[2], box[3], cfg.template_factor)
    return (crop_resize(fp.rgb, box[0], box[1], side, cfg.template_size),
            crop_resize(fp.x_mod, box[0], box[1], side, cfg.template_size))


# ------------------------------------------------------------------ inference

@dataclass(frozen=True)
class TrackState:
    params: T.Params
    cfg: TrackerConfig
    template_init: tuple   # (rgb, x) crops
    template_dyn: tuple
    box: tuple             # (cx, cy, w, h) in frame pixels
    frames_since_update: int = 0
    last_crop: tuple = ()  # (cx, cy, side)
    updates: int = 0


def init(fp: FramePair, bb: BBox, cfg: TrackerConfig, params: T.Params) -> TrackState:
    h, w = fp.rgb.shape[:2]
    x1, y1, x2, y2 = bb.corners()
    if x2 <= 0 or y2 <= 0 or x1 >= w or y1 >= h:
        raise ValueError(f"init: box {bb.to_xywh()} lies outside the {w}x{h} frame")
    box = (bb.x, bb.y, bb.w, bb.h)
    tmpl = crop_template(fp, box, cfg)
    tmpl = (tmpl[0].copy(), tmpl[1].copy())
    for a in tmpl:
        a.setflags(write=False)
    return TrackState(params, cfg, tmpl, tmpl, box)


def maybe_update_template(st: TrackState, score: float, bb, fp: FramePair) -> TrackState:
    """Refresh the dynamic template once the interval is reached and the score clears the gate."""
    counter = st.frames_since_update + 1
    if counter >= st.cfg.update_interval and score > st.cfg.update_threshold:
        box = bb if not isinstance(bb, BBox) else (bb.x, bb.y, bb.w, bb.h)
        dyn = crop_template(fp, box, st.cfg)
        return replace(st, template_dyn=dyn, frames_since_update=0, updates=st.updates + 1)
    return replace(st, frames_since_update=counter)


def track_step(st: TrackState, fp: FramePair, record=None):
    cfg = st.cfg
    cx, cy, w, h = st.box
    w, h = max(w, MIN_EXTENT), max(h, MIN_EXTENT)
    side = _side(w, h, cfg.search_factor)
    s_rgb = crop_resize(fp.rgb, cx, cy, side, cfg.search_size)
    s_x = crop_resize(fp.x_mod, cx, cy, side, cfg.search_size)
    with T.no_grad():
        ho = forward(st.params, cfg, (st.template_init[0], st.template_dyn[0], s_rgb),
                     (st.template_init[1], st.template_dyn[1], s_x), record)
    crop_box = decode_box(ho, cfg.patch)
    fb = box_from_crop(crop_box.as_array(), cx, cy, side, cfg.search_size)
    fb[2], fb[3] = max(fb[2], MIN_EXTENT), max(fb[3], MIN_EXTENT)
    bb = BBox(*(float(v) for v in fb), score=crop_box.score)
    st = replace(st, box=tuple(float(v) for v in fb), last_crop=(cx, cy, side))
    st = maybe_update_template(st, crop_box.score, bb, fp)
    return bb, crop_box.score, st


def run_sequence(params, cfg, ds, attn_sink=None):
    """Track a whole sequence from its first ground-truth box; returns BBoxes."""
    first = BBox(*ds.gt[0], score=1.0)
    st = init(ds.frame(0), first, cfg, params)
    out = [first]
    for i in range(1, len(ds)):
        rec = [] if attn_sink is not None else None
        bb, _, st = track_step(st, ds.frame(i), rec)
        if attn_sink is not None:
            attn_sink.append((i, rec))
        out.append(bb)
    return out


# ------------------------------------------------------------------ training

def sample_batch(datasets, cfg: TrackerConfig, rng, n):
    """Draw ``n`` (template, dynamic template, search) triples with crop jitter."""
    shape_t = (n, cfg.template_size, cfg.template_size, 3)
    shape_s = (n, cfg.search_size, cfg.search_size, 3)
    ti_r, td_r, s_r = np.empty(shape_t), np.empty(shape_t), np.empty(shape_s)
    ti_x, td_x, s_x = np.empty(shape_t), np.empty(shape_t), np.empty(shape_s)
    gts = np.empty((n, 4))
    for b in range(n):
        ds = datasets[int(rng.integers(len(datasets)))]
        vis = np.flatnonzero(ds.visible)
        k = int(vis[rng.integers(len(vis))])
        near = vis[np.abs(vis - k) <= cfg.max_gap]
        i = int(near[rng.integers(len(near))])
        j = int(near[rng.integers(len(near))])
        ti_r[b], ti_x[b] = crop_template(ds.frame(i), ds.gt[i], cfg)
        td_r[b], td_x[b] = crop_template(ds.frame(j), ds.gt[j], cfg)
        box = ds.gt[k]
        side = _side(box[2], box[3], cfg.search_factor) * np.exp(rng.uniform(-1, 1) * cfg.jitter_scale)
        shift = rng.uniform(-1, 1, 2) * cfg.jitter_shift * side / 2.0
        cx, cy = box[0] + shift[0], box[1] + shift[1]
        fp = ds.frame(k)
        s_r[b] = crop_resize(fp.rgb, cx, cy, side, cfg.search_size)
        s_x[b] = crop_resize(fp.x_mod, cx, cy, side, cfg.search_size)
        gts[b] = box_to_crop(box, cx, cy, side, cfg.search_size)
    return (ti_r, td_r, s_r), (ti_x, td_x, s_x), gts


class AdamW:
    """Adam with decoupled weight decay and two learning-rate groups."""

    def __init__(self, params: T.Params, lr_for, weight_decay, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr_for = lr_for
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.trainable().items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.trainable().items()}

    def step(self, grads, lr_scale=1.0):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, g in grads.items():
            p = self.params[name].data
            lr = self.lr_for(name) * lr_scale
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if p.ndim >= 2:
                p -= lr * self.wd * p
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(datasets, cfg: TrackerConfig, params: T.Params | None = None, steps: int | None = None,
          callback=None):
    """Mini-batch AdamW over random triples drawn from ``datasets``.

    Runs ``epochs * samples_per_epoch // batch`` steps unless ``steps`` is
    given; the learning rate of both groups drops by 10x from
    ``decay_epoch`` on. Returns (params, per-step loss trace).
    """
    if not datasets:
        raise ValueError("train: empty dataset list")
    params = init_params(cfg) if params is None else params
    per_epoch = max(cfg.samples_per_epoch // cfg.batch, 1)
    total = cfg.epochs * per_epoch if steps is None else steps
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(params, lambda n: cfg.lr_ami if is_ami_param(n) else cfg.lr_rest,
                cfg.weight_decay, (cfg.beta1, cfg.beta2))
    weights = LossWeights(cfg.lambda_l1, cfg.lambda_giou)
    trace = []
    for step in range(total):
        epoch, batch_no = divmod(step, per_epoch)
        rgb, xm, gts = sample_batch(datasets, cfg, rng, cfg.batch)
        params.zero_grad()
        ho = forward(params, cfg, rgb, xm)
        loss = total_loss(ho, gts, cfg.search_size, weights)
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"train: non-finite loss at epoch {epoch} batch {batch_no} (step {step})")
        grads = T.backward(loss, params)
        opt.step(grads, 0.1 if epoch >= cfg.decay_epoch else 1.0)
        trace.append(value)
        if callback is not None:
            callback(step, value)
        if step % 100 == 0:
            log.info("step %d epoch %d loss %.4f", step, epoch, value)
    params.zero_grad()
    return params, trace
