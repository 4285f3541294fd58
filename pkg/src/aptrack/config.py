"""Tracker configuration and the flat ``key = value`` text format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

AMI_VARIANTS = ("full", "gmp_only", "lt_only")


@dataclass
class TrackerConfig:
    # geometry
    patch: int = 8
    template_size: int = 32
    search_size: int = 64
    dim: int = 64
    layers: int = 6
    heads: int = 2
    n_tokens: int = 32
    ami_layers: tuple = (2, 4)
    ami_heads: int = 1
    ami_variant: str = "full"
    head_hidden: int = 64
    template_factor: float = 2.0
    search_factor: float = 4.0
    # optimizer
    lr_ami: float = 2e-3
    lr_rest: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 20
    decay_epoch: int = 10
    batch: int = 8
    samples_per_epoch: int = 2000
    max_gap: int = 50
    jitter_shift: float = 0.25
    jitter_scale: float = 0.15
    # loss
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    # inference
    update_interval: int = 5
    update_threshold: float = 0.65
    seed: int = 0

    def __post_init__(self):
        self.ami_layers = tuple(sorted(set(int(i) for i in self.ami_layers)))
        self.validate()

    def validate(self):
        for name in ("patch", "template_size", "search_size", "dim", "layers", "heads",
                     "ami_heads", "head_hidden", "epochs", "batch", "samples_per_epoch",
                     "update_interval", "max_gap"):
            if getattr(self, name) <= 0:
                raise ValueError(f"config: {name} must be positive, got {getattr(self, name)}")
        if self.n_tokens < 0:
            raise ValueError("config: n_tokens must be >= 0 (0 selects direct interaction)")
        if not 0.0 < self.update_threshold < 1.0:
            raise ValueError("config: update_threshold must lie in (0, 1)")
        for s in (self.template_size, self.search_size):
            if s % self.patch:
                raise ValueError(f"config: image size {s} not divisible by patch {self.patch}")
        if self.dim % self.heads or self.dim % self.ami_heads:
            raise ValueError("config: dim must be divisible by heads and ami_heads")
        if any(i < 1 or i > self.layers for i in self.ami_layers):
            raise ValueError(f"config: ami_layers {self.ami_layers} outside 1..{self.layers}")
        if self.ami_variant not in AMI_VARIANTS:
            raise ValueError(f"config: ami_variant must be one of {AMI_VARIANTS}")
        if self.lr_ami <= 0 or self.lr_rest <= 0:
            raise ValueError("config: learning rates must be positive")

    # derived geometry
    @property
    def grid(self) -> int:
        return self.search_size // self.patch

    @property
    def n_template(self) -> int:
        return 2 * (self.template_size // self.patch) ** 2

    @property
    def n_search(self) -> int:
        return self.grid ** 2

    @property
    def n_total(self) -> int:
        return self.n_template + self.n_search

    def replace(self, **kw) -> "TrackerConfig":
        return dataclasses.replace(self, **kw)


def _coerce(raw: str, default):
    raw = raw.strip()
    if isinstance(default, tuple):
        if raw in ("", "none", "()"):
            return ()
        return tuple(int(p) for p in raw.replace(" ", "").strip("()").split(",") if p)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_pairs(lines, allowed: dict) -> dict:
    """Parse ``key = value`` lines against ``allowed`` defaults; rejects unknown keys."""
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in allowed:
            raise ValueError(f"unknown config key {key!r}")
        out[key] = _coerce(value, allowed[key])
    return out


def _defaults(cls) -> dict:
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in fields(cls)}


def load_config(path=None, overrides=()) -> TrackerConfig:
    """Read a config file (optional) and apply ``key=value`` overrides on top."""
    allowed = _defaults(TrackerConfig)
    values = {}
    if path is not None:
        with open(path) as fh:
            values.update(parse_pairs(fh, allowed))
    values.update(parse_pairs(overrides, allowed))
    return TrackerConfig(**values)


def format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(i) for i in v)
    return repr(v) if isinstance(v, float) else str(v)


def dump_config(cfg, path):
    with open(path, "w") as fh:
        for f in fields(cfg):
            fh.write(f"{f.name} = {format_value(getattr(cfg, f.name))}\n")


__all__ = ["TrackerConfig", "load_config", "dump_config", "parse_pairs", "AMI_VARIANTS"]
