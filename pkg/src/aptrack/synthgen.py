"""Deterministic paired-modality sequences with ground truth and scripted degradations.

The RGB stream shows a colored target over a textured background; the X
stream is an inverted-contrast rendering (bright target on a dark
background), so a scene with the RGB stream blacked out stays solvable from
X alone. Frames are quantized to 8 bits at generation time so the PPM files
on disk hold exactly the generated values.
"""
from __future__ import annotations

import ast
import os
from dataclasses import dataclass, fields, replace

import numpy as np

MODES = ("blackout", "noise", "blur", "occluder")
MOTIONS = ("static", "linear", "sinusoidal", "random_walk")
MARGIN = 2.0


@dataclass(frozen=True)
class Event:
    modality: str  # "rgb" or "x"
    start: int
    end: int       # inclusive
    mode: str
    param: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.modality not in ("rgb", "x"):
            raise ValueError(f"event modality must be 'rgb' or 'x', got {self.modality!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown degradation mode {self.mode!r}")
        if self.end < self.start:
            raise ValueError(f"event interval [{self.start}, {self.end}] is empty")

    def encode(self) -> str:
        return f"{self.modality}:{self.start}-{self.end}:{self.mode}:{float(self.param)!r}:{self.seed}"

    @classmethod
    def decode(cls, text: str) -> "Event":
        mod, span, mode, *rest = text.strip().split(":")
        a, b = span.split("-")
        param = float(rest[0]) if rest else 0.0
        seed = int(rest[1]) if len(rest) > 1 else 0
        return cls(mod, int(a), int(b), mode, param, seed)


@dataclass
class SceneSpec:
    frames: int = 60
    height: int = 128
    width: int = 128
    shape: str = "box"
    target_w: float = 16.0
    target_h: float = 16.0
    start_x: float = 64.0
    start_y: float = 64.0
    motion: str = "linear"
    velocity_x: float = 0.5
    velocity_y: float = 0.3
    amplitude_x: float = 20.0
    amplitude_y: float = 12.0
    period: float = 40.0
    max_step: float = 1.5
    target_rgb: tuple = (0.85, 0.25, 0.2)
    target_x: float = 0.9
    texture_seed: int = 0
    texture_amp: float = 0.08
    distractors: int = 2
    distractor_rgb: tuple = (0.25, 0.35, 0.8)
    distractor_x: float = 0.45
    events: tuple = ()
    absent: tuple = ()  # (start, end) inclusive intervals where the target is not drawn
    align_jitter: float = 0.0

    def validate(self):
        if self.frames <= 0 or self.height <= 0 or self.width <= 0:
            raise ValueError("scene: frames and canvas size must be positive")
        if self.shape not in ("box", "disc"):
            raise ValueError(f"scene: unknown target shape {self.shape!r}")
        if self.motion not in MOTIONS:
            raise ValueError(f"scene: unknown motion model {self.motion!r}")
        for ev in self.events:
            if ev.start < 0 or ev.end >= self.frames:
                raise ValueError(f"scene: event {ev.encode()} outside 0..{self.frames - 1}")
        for a, b in self.absent:
            if a < 0 or b >= self.frames or b < a:
                raise ValueError(f"scene: absent interval ({a}, {b}) invalid")


# ------------------------------------------------------------------ spec text

def _encode_value(v):
    if isinstance(v, tuple) and v and isinstance(v[0], Event):
        return ";".join(e.encode() for e in v)
    return repr(v)


def spec_to_text(spec: SceneSpec) -> str:
    return "".join(f"{f.name} = {_encode_value(getattr(spec, f.name))}\n" for f in fields(spec))


def spec_from_pairs(pairs: dict, base: SceneSpec | None = None) -> SceneSpec:
    """Build a spec from string values; unknown keys are rejected."""
    base = base or SceneSpec()
    names = {f.name for f in fields(SceneSpec)}
    kw = {}
    for key, raw in pairs.items():
        if key not in names:
            raise ValueError(f"unknown scene key {key!r}")
        raw = raw.strip()
        if key == "events":
            if raw in ("", "()"):
                kw[key] = ()
            elif raw.startswith("("):
                kw[key] = tuple(Event.decode(s) for s in ast.literal_eval(raw))
            else:
                kw[key] = tuple(Event.decode(s) for s in raw.split(";") if s.strip())
        elif key == "absent":
            val = ast.literal_eval(raw) if raw else ()
            kw[key] = tuple(tuple(int(i) for i in iv) for iv in val)
        else:
            default = getattr(base, key)
            val = ast.literal_eval(raw) if not isinstance(default, str) else raw.strip("'\"")
            if isinstance(default, float):
                val = float(val)
            elif isinstance(default, tuple):
                val = tuple(val)
            kw[key] = val
    return replace(base, **kw)


def spec_from_text(text: str) -> SceneSpec:
    pairs = {}
    for line in text.splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            pairs[k.strip()] = v
    return spec_from_pairs(pairs)


# ------------------------------------------------------------------ dataset

@dataclass
class SequenceDataset:
    """Frames and ground truth of one sequence.

    Boxes are stored as (cx, cy, w, h) rows in pixels.
    """
    rgb: np.ndarray            # (F, H, W, 3) in [0, 1]
    x: np.ndarray              # (F, H, W, 3) in [0, 1]
    gt: np.ndarray             # (F, 4)
    visible: np.ndarray        # (F,) bool
    gt_x: np.ndarray | None = None
    spec: SceneSpec | None = None
    name: str = "seq"

    def __post_init__(self):
        n = len(self.rgb)
        if not (len(self.x) == len(self.gt) == len(self.visible) == n):
            raise ValueError("SequenceDataset: per-frame arrays differ in length")
        if self.gt_x is not None and len(self.gt_x) != n:
            raise ValueError("SequenceDataset: gt_x length mismatch")

    def __len__(self):
        return len(self.rgb)

    def frame(self, i):
        from .embed import FramePair
        return FramePair(self.rgb[i], self.x[i], i)

    def copy(self):
        return SequenceDataset(self.rgb.copy(), self.x.copy(), self.gt.copy(), self.visible.copy(),
                               None if self.gt_x is None else self.gt_x.copy(), self.spec, self.name)


# ------------------------------------------------------------------ rendering

def _trajectory(spec: SceneSpec, rng):
    t = np.arange(spec.frames, dtype=np.float64)
    if spec.motion == "static":
        xs = np.full_like(t, spec.start_x)
        ys = np.full_like(t, spec.start_y)
    elif spec.motion == "linear":
        xs = spec.start_x + spec.velocity_x * t
        ys = spec.start_y + spec.velocity_y * t
    elif spec.motion == "sinusoidal":
        xs = spec.start_x + spec.amplitude_x * np.sin(2 * np.pi * t / spec.period)
        ys = spec.start_y + spec.amplitude_y * np.sin(4 * np.pi * t / spec.period)
    else:
        # reflecting random walk: bounded by construction
        lo_x, hi_x = _bounds(spec.width, spec.target_w)
        lo_y, hi_y = _bounds(spec.height, spec.target_h)
        steps = rng.uniform(-spec.max_step, spec.max_step, size=(spec.frames, 2))
        xs, ys = np.empty_like(t), np.empty_like(t)
        px, py = spec.start_x, spec.start_y
        for i in range(spec.frames):
            if i:
                px = _reflect(px + steps[i, 0], lo_x, hi_x)
                py = _reflect(py + steps[i, 1], lo_y, hi_y)
            xs[i], ys[i] = px, py
    return xs, ys


def _bounds(extent, size):
    return MARGIN + size / 2.0, extent - MARGIN - size / 2.0


def _reflect(v, lo, hi):
    if v < lo:
        v = 2 * lo - v
    if v > hi:
        v = 2 * hi - v
    return float(np.clip(v, lo, hi))


def _check_inside(spec, xs, ys, what="target"):
    lo_x, hi_x = _bounds(spec.width, spec.target_w)
    lo_y, hi_y = _bounds(spec.height, spec.target_h)
    bad = (xs < lo_x - 1e-9) | (xs > hi_x + 1e-9) | (ys < lo_y - 1e-9) | (ys > hi_y + 1e-9)
    if bad.any():
        f = int(np.argmax(bad))
        raise ValueError(f"scene: {what} leaves the canvas at frame {f} "
                         f"(center {xs[f]:.1f},{ys[f]:.1f}) under the {spec.motion} motion model")


def _coverage(h, w, cx, cy, bw, bh, shape):
    """Fractional pixel coverage of a box or disc centered at (cx, cy)."""
    if shape == "box":
        xs = np.arange(w, dtype=np.float64)
        ys = np.arange(h, dtype=np.float64)
        cov_x = np.clip(np.minimum(xs + 1, cx + bw / 2) - np.maximum(xs, cx - bw / 2), 0, 1)
        cov_y = np.clip(np.minimum(ys + 1, cy + bh / 2) - np.maximum(ys, cy - bh / 2), 0, 1)
        return cov_y[:, None] * cov_x[None, :]
    ss = 4
    off = (np.arange(ss) + 0.5) / ss
    yy = (np.arange(h)[:, None] + off[None, :]).reshape(-1)
    xx = (np.arange(w)[:, None] + off[None, :]).reshape(-1)
    inside = (((xx[None, :] - cx) / (bw / 2)) ** 2 + ((yy[:, None] - cy) / (bh / 2)) ** 2) <= 1.0
    return inside.reshape(h, ss, w, ss).mean(axis=(1, 3))


def _texture(h, w, rng, amp):
    base = rng.normal(0, 1, size=(h // 8 + 2, w // 8 + 2))
    # bilinear upsample of coarse noise: smooth blotches
    ys = np.linspace(0, base.shape[0] - 1.001, h)
    xs = np.linspace(0, base.shape[1] - 1.001, w)
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    b = base
    smooth = ((1 - fy) * (1 - fx) * b[y0][:, x0] + (1 - fy) * fx * b[y0][:, x0 + 1]
              + fy * (1 - fx) * b[y0 + 1][:, x0] + fy * fx * b[y0 + 1][:, x0 + 1])
    return amp * smooth + 0.5 * amp * rng.normal(0, 1, size=(h, w))


def generate_sequence(spec: SceneSpec, seed: int = 0, name: str = "seq") -> SequenceDataset:
    spec.validate()
    rng = np.random.default_rng(seed)
    xs, ys = _trajectory(spec, rng)
    _check_inside(spec, xs, ys)
    F, H, W = spec.frames, spec.height, spec.width
    gt = np.stack([xs, ys, np.full(F, spec.target_w), np.full(F, spec.target_h)], axis=1)
    gt_x = gt.copy()
    if spec.align_jitter > 0:
        gt_x[:, :2] += rng.normal(0, spec.align_jitter, size=(F, 2))
        lo_x, hi_x = _bounds(W, spec.target_w)
        lo_y, hi_y = _bounds(H, spec.target_h)
        gt_x[:, 0] = np.clip(gt_x[:, 0], lo_x, hi_x)
        gt_x[:, 1] = np.clip(gt_x[:, 1], lo_y, hi_y)

    visible = np.ones(F, dtype=bool)
    for a, b in spec.absent:
        visible[a:b + 1] = False

    # static backgrounds
    trng = np.random.default_rng(spec.texture_seed)
    yy, xx = np.mgrid[0:H, 0:W] / max(H, W)
    bg_rgb = np.stack([0.45 + 0.15 * xx, 0.5 + 0.1 * yy, 0.4 + 0.1 * (1 - xx)], axis=-1)
    bg_rgb = bg_rgb + _texture(H, W, trng, 0.12)[..., None]
    bg_x = 0.08 + _texture(H, W, trng, 0.03)
    tgt_tex = _texture(H, W, trng, spec.texture_amp)

    # distractors bounce linearly
    lo_x, hi_x = _bounds(W, spec.target_w)
    lo_y, hi_y = _bounds(H, spec.target_h)
    dpos = np.stack([rng.uniform(lo_x, hi_x, spec.distractors),
                     rng.uniform(lo_y, hi_y, spec.distractors)], axis=1)
    dvel = rng.uniform(-1.0, 1.0, size=(spec.distractors, 2))

    rgb = np.empty((F, H, W, 3))
    xm = np.empty((F, H, W, 3))
    drgb = np.asarray(spec.distractor_rgb, dtype=np.float64)
    trgb = np.asarray(spec.target_rgb, dtype=np.float64)
    for f in range(F):
        r = bg_rgb.copy()
        x = bg_x.copy()
        for d in range(spec.distractors):
            cov = _coverage(H, W, dpos[d, 0], dpos[d, 1], spec.target_w, spec.target_h, spec.shape)
            r = r * (1 - cov[..., None]) + cov[..., None] * drgb
            x = x * (1 - cov) + cov * spec.distractor_x
            for k, (lo, hi) in enumerate(((lo_x, hi_x), (lo_y, hi_y))):
                nxt = dpos[d, k] + dvel[d, k]
                if nxt < lo or nxt > hi:
                    dvel[d, k] = -dvel[d, k]
                dpos[d, k] = _reflect(nxt, lo, hi)
        if visible[f]:
            cov = _coverage(H, W, gt[f, 0], gt[f, 1], spec.target_w, spec.target_h, spec.shape)
            r = r * (1 - cov[..., None]) + cov[..., None] * (trgb + tgt_tex[..., None])
            covx = _coverage(H, W, gt_x[f, 0], gt_x[f, 1], spec.target_w, spec.target_h, spec.shape)
            x = x * (1 - covx) + covx * (spec.target_x + 0.5 * tgt_tex)
        rgb[f] = r
        xm[f] = x[..., None]
    ds = SequenceDataset(np.clip(rgb, 0, 1), np.clip(xm, 0, 1), gt, visible,
                         gt_x if spec.align_jitter > 0 else None, spec, name)
    for ev in spec.events:
        ds = degrade(ds, ev)
    ds.rgb = quantize(ds.rgb)
    ds.x = quantize(ds.x)
    return ds


def quantize(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


# ------------------------------------------------------------------ degradations

def box_blur(img, k):
    """k x k mean filter with zero padding (same-size output), per channel."""
    k = int(k)
    if k <= 1:
        return img.copy()
    lo = k // 2
    hi = k - 1 - lo
    pad = np.pad(img, ((lo, hi), (lo, hi), (0, 0)))
    c = np.cumsum(np.cumsum(pad, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0), (0, 0)))
    h, w = img.shape[:2]
    s = c[k:k + h, k:k + w] - c[:h, k:k + w] - c[k:k + h, :w] + c[:h, :w]
    return s / (k * k)


def degrade(ds: SequenceDataset, event: Event) -> SequenceDataset:
    """Apply one degradation to one modality over an inclusive frame interval."""
    if event.mode not in MODES:
        raise ValueError(f"unknown degradation mode {event.mode!r}")
    if event.start < 0 or event.end >= len(ds):
        raise ValueError(f"event interval [{event.start}, {event.end}] outside 0..{len(ds) - 1}")
    out = ds.copy()
    frames = out.rgb if event.modality == "rgb" else out.x
    gt = ds.gt if event.modality == "rgb" or ds.gt_x is None else ds.gt_x
    rng = np.random.default_rng(event.seed)
    for f in range(event.start, event.end + 1):
        img = frames[f]
        if event.mode == "blackout":
            img = np.zeros_like(img)
        elif event.mode == "noise":
            if event.param > 0:
                img = np.clip(img + rng.normal(0, event.param, img.shape), 0, 1)
        elif event.mode == "blur":
            img = box_blur(img, event.param)
        else:
            # gray slab over the target; param is the covered width fraction
            cx, cy, w, h = gt[f]
            frac = event.param if event.param > 0 else 0.6
            hh, ww = img.shape[:2]
            cov = _coverage(hh, ww, cx - w / 2 + frac * w / 2, cy, frac * w + 1, h + 2, "box")
            img = img * (1 - cov[..., None]) + 0.5 * cov[..., None]
        frames[f] = img
    return out


# ------------------------------------------------------------------ disk format

def write_ppm(path, img):
    arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    pix = np.frombuffer(data[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return pix.reshape(h, w, 3).astype(np.float64) / 255.0


def _fmt_box(b):
    l, t = float(b[0] - b[2] / 2), float(b[1] - b[3] / 2)
    return f"{l!r},{t!r},{float(b[2])!r},{float(b[3])!r}"


def read_boxes(path) -> np.ndarray:
    """Read "left,top,w,h" lines into (cx, cy, w, h) rows."""
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                l, t, w, h = (float(v) for v in line.replace("\t", ",").split(",")[:4])
                rows.append((l + w / 2, t + h / 2, w, h))
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def write_dataset(ds: SequenceDataset, root):
    os.makedirs(os.path.join(root, "rgb"), exist_ok=True)
    os.makedirs(os.path.join(root, "x"), exist_ok=True)
    for i in range(len(ds)):
        write_ppm(os.path.join(root, "rgb", f"{i:06d}.ppm"), ds.rgb[i])
        write_ppm(os.path.join(root, "x", f"{i:06d}.ppm"), ds.x[i])
    with open(os.path.join(root, "groundtruth.txt"), "w") as fh:
        fh.writelines(_fmt_box(b) + "\n" for b in ds.gt)
    if ds.gt_x is not None:
        with open(os.path.join(root, "groundtruth_x.txt"), "w") as fh:
            fh.writelines(_fmt_box(b) + "\n" for b in ds.gt_x)
    with open(os.path.join(root, "visibility.txt"), "w") as fh:
        fh.writelines(f"{int(v)}\n" for v in ds.visible)
    with open(os.path.join(root, "spec.txt"), "w") as fh:
        fh.write(spec_to_text(ds.spec or SceneSpec(frames=len(ds))))


def read_dataset(root) -> SequenceDataset:
    gt = read_boxes(os.path.join(root, "groundtruth.txt"))
    n = len(gt)
    rgb = np.stack([read_ppm(os.path.join(root, "rgb", f"{i:06d}.ppm")) for i in range(n)])
    xm = np.stack([read_ppm(os.path.join(root, "x", f"{i:06d}.ppm")) for i in range(n)])
    gx_path = os.path.join(root, "groundtruth_x.txt")
    gt_x = read_boxes(gx_path) if os.path.exists(gx_path) else None
    vis_path = os.path.join(root, "visibility.txt")
    if os.path.exists(vis_path):
        with open(vis_path) as fh:
            visible = np.array([int(v) for v in fh.read().split()], dtype=bool)
    else:
        visible = np.ones(n, dtype=bool)
    spec = None
    spec_path = os.path.join(root, "spec.txt")
    if os.path.exists(spec_path):
        with open(spec_path) as fh:
            spec = spec_from_text(fh.read())
    return SequenceDataset(rgb, xm, gt, visible, gt_x, spec, os.path.basename(os.path.normpath(root)))


# ------------------------------------------------------------------ presets

def random_spec(rng, frames=60, size=128, events=(), motion=None) -> SceneSpec:
    """A varied scene: target size, colors, start, and motion drawn from ``rng``."""
    tw, th = rng.uniform(12, 20), rng.uniform(12, 20)
    lo_x, hi_x = MARGIN + tw / 2 + 20, size - MARGIN - tw / 2 - 20
    lo_y, hi_y = MARGIN + th / 2 + 20, size - MARGIN - th / 2 - 20
    motion = motion or ("random_walk", "sinusoidal")[int(rng.integers(2))]
    hue = rng.uniform(0.55, 0.95, 3) * np.array([1.0, 0.5, 0.4])
    return SceneSpec(
        frames=frames, height=size, width=size,
        shape=("box", "disc")[int(rng.integers(2))],
        target_w=float(tw), target_h=float(th),
        start_x=float(rng.uniform(lo_x, hi_x)), start_y=float(rng.uniform(lo_y, hi_y)),
        motion=motion, amplitude_x=float(rng.uniform(5, 15)), amplitude_y=float(rng.uniform(3, 10)),
        period=float(rng.uniform(30, 60)), max_step=float(rng.uniform(0.5, 2.0)),
        target_rgb=tuple(float(v) for v in hue), target_x=float(rng.uniform(0.75, 0.95)),
        texture_seed=int(rng.integers(1 << 30)), distractors=2,
        distractor_rgb=tuple(float(v) for v in rng.uniform(0.2, 0.7, 3)),
        distractor_x=float(rng.uniform(0.3, 0.5)), events=tuple(events),
    )


def alternating_blackout(frames=60, span=12, seed=0):
    """Blackout events alternating between RGB and X, starting after the first frame."""
    evs, mod, start = [], "rgb", 5
    while start + span <= frames:
        evs.append(Event(mod, start, min(start + span - 1, frames - 1), "blackout", 0.0, seed))
        mod = "x" if mod == "rgb" else "rgb"
        start += span + 3
    return tuple(evs)


def make_sequence_set(n, seed, frames=60, size=128, blackout=False):
    """``n`` random scenes, with alternating blackouts when requested."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        events = alternating_blackout(frames, seed=seed + i) if blackout else ()
        spec = random_spec(rng, frames, size, events)
        try:
            ds = generate_sequence(spec, seed=seed * 1000 + i, name=f"seq{i:03d}")
        except ValueError:
            spec = replace(spec, motion="random_walk")
            ds = generate_sequence(spec, seed=seed * 1000 + i, name=f"seq{i:03d}")
        out.append(ds)
    return out

