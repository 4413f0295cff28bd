"""Run configuration: one flat dataclass, parsed from ``key=value`` text."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .errors import ConfigError


@dataclass
class RunConfig:
    seed: int = 0
    # scenes
    grid: int = 16
    n_categories: int = 12
    min_objects: int = 2
    max_objects: int = 5
    shape_family: str = "rectangles"
    noise: float = 0.05
    d_appearance: int = 32
    d_emb: int = 32
    codebook_min_sep: float = 0.3
    min_size: int = 2
    max_size: int = 0  # 0: 3/8 of the grid side
    max_queries: int = 0  # 0: up to min(objects, n_slots)
    # slot attention
    n_slots: int = 7
    n_iters: int = 3
    d_slot: int = 64
    d_attn: int = 64
    slot_mlp_hidden: int = 128
    # mapping network
    map_blocks: int = 3
    map_heads: int = 4
    map_ff_mult: int = 4
    # decoder / heads
    dec_hidden: int = 256
    dec_layers: int = 3
    head_hidden: int = 64
    # objective and optimizer
    tau: float = 0.1
    lam: float = 1.0
    lr: float = 4e-4
    lr_schedule: str = "constant"
    grad_clip: float = 0.0  # global-norm clip, 0 disables
    batch_size: int = 32
    steps: int = 20000
    # bookkeeping
    ckpt_every: int = 1000
    keep_checkpoints: int = 3
    eval_every: int = 1000
    eval_samples: int = 128
    workers: int = 1
    # ablation switches
    contrastive_loss: bool = True
    decoder_conditioning: bool = True
    slot_init: str = "assign"  # assign | add | none
    point_queries: bool = True
    target_codebook: str = "shared"  # shared | distinct
    use_queries: bool = True  # false: M = 0 everywhere (unconditioned pipeline)

    def __post_init__(self):
        self.validate()

    def validate(self):
        checks = [
            (self.n_slots >= 1, "n_slots must be >= 1"),
            (self.n_iters >= 1, "n_iters must be >= 1"),
            (self.grid >= 1, "grid must be >= 1"),
            (1 <= self.min_objects <= self.max_objects, "need 1 <= min_objects <= max_objects"),
            (self.noise >= 0, "noise must be >= 0"),
            (self.tau > 0, "tau must be > 0"),
            (self.lam >= 0, "lam must be >= 0"),
            (self.lr > 0, "lr must be > 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.steps >= 0, "steps must be >= 0"),
            (self.max_queries >= 0, "max_queries must be >= 0"),
            (self.min_size >= 1 and (self.max_size == 0 or self.max_size >= self.min_size),
             "need min_size >= 1 and max_size >= min_size (or 0)"),
            (self.slot_init in ("assign", "add", "none"), "slot_init must be assign|add|none"),
            (self.target_codebook in ("shared", "distinct"), "target_codebook must be shared|distinct"),
            (self.shape_family in ("rectangles", "blobs", "mixed"), "shape_family must be rectangles|blobs|mixed"),
            (self.lr_schedule in ("constant", "cosine"), "lr_schedule must be constant|cosine"),
            (self.workers >= 1, "workers must be >= 1"),
            (self.ckpt_every >= 1 and self.eval_every >= 1, "ckpt_every/eval_every must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def d_feat(self):
        return self.d_appearance + 2

    @property
    def d_query(self):
        return 2 * self.d_emb

    @property
    def queries_per_scene(self):
        return self.n_slots if self.max_queries == 0 else min(self.max_queries, self.n_slots)

    def replace(self, **changes):
        return from_dict({**self.to_dict(), **changes})

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_text(self):
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.to_dict().items())

    def diff(self, other):
        a, b = self.to_dict(), other.to_dict()
        return {k: (a[k], b[k]) for k in a if a[k] != b[k]}


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key, raw):
    kind = _FIELDS[key].type
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if kind == "bool":
            if isinstance(raw, bool):
                return raw
            low = str(raw).lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            if isinstance(raw, bool):
                raise ValueError(raw)
            return int(raw)
        if kind == "float":
            return float(raw)
        return str(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind})") from None


def from_dict(d):
    unknown = sorted(set(d) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**{k: _coerce(k, v) for k, v in d.items()})


def parse_assignments(lines, source="<config>"):
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path=None, overrides=(), seed=None):
    """Defaults <- config file <- ``--set`` overrides <- ``--seed``."""
    d = {}
    if path is not None:
        try:
            with open(path) as fh:
                d.update(parse_assignments(fh, str(path)))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    d.update(parse_assignments(overrides, "--set"))
    if seed is not None:
        d["seed"] = seed
    return from_dict(d)
