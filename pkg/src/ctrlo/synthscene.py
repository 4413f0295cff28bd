"""Procedural multi-object scenes in patch-feature space.

Stands in for a frozen image encoder: every patch gets the appearance code
of the object covering it (or a background code), Gaussian noise, and two
trailing channels with its normalized (x, y) position. Scenes come with
ground-truth masks, centroids and a query set over a random subset of the
objects.

Also reads and writes the ``CTLO`` binary dataset format.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError, GenerationError, ShapeError, ValidationError

MAGIC = b"CTLO"
VERSION = 1


def f32(x):
    """Round to float32 precision but keep float64 storage (lossless on disk)."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


@dataclass
class FeatureGrid:
    grid: int
    data: np.ndarray  # (K, D_feat)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] != self.grid * self.grid:
            raise ShapeError(f"feature grid: expected ({self.grid ** 2}, D), got {self.data.shape}")

    @property
    def n_patches(self):
        return self.data.shape[0]

    @property
    def dim(self):
        return self.data.shape[1]


@dataclass
class SceneObject:
    category: int
    mask: np.ndarray  # (K,) bool
    center: np.ndarray  # (2,) normalized (x, y)


@dataclass
class SceneSpec:
    grid: int
    objects: list = field(default_factory=list)

    @property
    def object_masks(self):
        k = self.grid * self.grid
        if not self.objects:
            return np.zeros((0, k), dtype=bool)
        return np.stack([o.mask for o in self.objects])

    @property
    def background(self):
        return ~self.object_masks.any(axis=0)

    def labels(self):
        """Per-patch object index, -1 for background."""
        lab = np.full(self.grid * self.grid, -1, dtype=np.int64)
        for i, o in enumerate(self.objects):
            lab[o.mask] = i
        return lab


@dataclass
class QuerySet:
    lang_codes: np.ndarray  # (M, D_emb)
    points: np.ndarray | None  # (M, 2) or None
    gt_object_ids: np.ndarray  # (M,)

    def __post_init__(self):
        self.gt_object_ids = np.asarray(self.gt_object_ids, dtype=np.int64).reshape(-1)
        m = len(self.gt_object_ids)
        codes = np.asarray(self.lang_codes, dtype=np.float64)
        self.lang_codes = codes.reshape(m, -1) if m else codes.reshape(0, codes.shape[-1] if codes.ndim == 2 else 0)
        if self.points is not None:
            self.points = np.asarray(self.points, dtype=np.float64).reshape(m, 2)
            if np.any(self.points < 0) or np.any(self.points > 1):
                raise ContractError("query points must lie in the unit square")

    def __len__(self):
        return len(self.gt_object_ids)

    def permute(self, order):
        order = np.asarray(order)
        pts = None if self.points is None else self.points[order]
        return QuerySet(self.lang_codes[order], pts, self.gt_object_ids[order])


@dataclass
class Sample:
    features: FeatureGrid
    scene: SceneSpec
    queries: QuerySet

    def categories_of_queries(self):
        return np.array([self.scene.objects[i].category for i in self.queries.gt_object_ids], dtype=np.int64)


@dataclass
class Codebook:
    codes: np.ndarray  # (C, D) unit rows
    role: str = "conditioning"

    def __len__(self):
        return len(self.codes)


@dataclass
class SceneConfig:
    grid: int = 16
    min_objects: int = 2
    max_objects: int = 5
    shape_family: str = "rectangles"  # rectangles | blobs | mixed
    noise: float = 0.05
    n_categories: int = 12
    d_appearance: int = 32
    d_emb: int = 32
    min_size: int = 2
    max_size: int | None = None
    max_queries: int | None = None
    min_sep: float = 0.3

    def __post_init__(self):
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ContractError("object count range must satisfy 1 <= min <= max")
        if self.noise < 0:
            raise ContractError("noise must be non-negative")
        if self.shape_family not in ("rectangles", "blobs", "mixed"):
            raise ContractError(f"unknown shape family {self.shape_family!r}")

    @property
    def size_range(self):
        hi = self.max_size if self.max_size is not None else max(self.min_size, (3 * self.grid) // 8)
        return self.min_size, hi

    @property
    def d_feat(self):
        return self.d_appearance + 2


@dataclass
class Codebooks:
    feature: Codebook
    background: np.ndarray
    conditioning: Codebook
    target: Codebook


def make_codebook(n_codes, dim, min_sep, rng, role="conditioning", max_tries=10000):
    """Rejection-sample unit vectors whose pairwise cosine is <= 1 - min_sep."""
    if n_codes < 1:
        raise ContractError("codebook needs at least one code")
    limit = 1.0 - min_sep
    codes = []
    tries = 0
    while len(codes) < n_codes:
        tries += 1
        if tries > max_tries:
            raise GenerationError(
                f"could not place {n_codes} codes in {dim} dims with separation {min_sep} "
                f"({len(codes)} placed after {max_tries} draws)")
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        if all(float(v @ c) <= limit for c in codes):
            codes.append(v)
    return Codebook(np.stack(codes), role)


def make_codebooks(config: SceneConfig, seed):
    """Independent feature / conditioning / target codebooks for one world."""
    ss = np.random.SeedSequence([int(seed), 0xC0DE])
    r_feat, r_cond, r_tgt = (np.random.default_rng(s) for s in ss.spawn(3))
    feat = make_codebook(config.n_categories + 1, config.d_appearance, config.min_sep, r_feat, "feature")
    cond = make_codebook(config.n_categories, config.d_emb, config.min_sep, r_cond, "conditioning")
    tgt = make_codebook(config.n_categories, config.d_emb, config.min_sep, r_tgt, "target")
    return Codebooks(Codebook(feat.codes[:-1], "feature"), feat.codes[-1], cond, tgt)


def patch_coords(grid):
    """(K, 2) normalized (x, y) patch centers, row-major."""
    r, c = np.divmod(np.arange(grid * grid), grid)
    return np.stack([(c + 0.5) / grid, (r + 0.5) / grid], axis=1)


def _shape_mask(grid, top, left, h, w, blob):
    m = np.zeros((grid, grid), dtype=bool)
    if not blob:
        m[top:top + h, left:left + w] = True
        return m
    rr, cc = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ry, rx = max(h / 2.0, 0.5), max(w / 2.0, 0.5)
    inside = ((rr - cy) / ry) ** 2 + ((cc - cx) / rx) ** 2 <= 1.0
    m[top:top + h, left:left + w] = inside
    return m


def _place_objects(config, n_obj, rng, max_tries=200):
    g = config.grid
    lo, hi = config.size_range
    hi = min(hi, g)
    occupied = np.zeros((g, g), dtype=bool)
    masks = []
    for _ in range(n_obj):
        for _ in range(max_tries):
            h, w = rng.integers(lo, hi + 1, size=2)
            top = rng.integers(0, g - h + 1)
            left = rng.integers(0, g - w + 1)
            fam = config.shape_family
            blob = fam == "blobs" or (fam == "mixed" and rng.random() < 0.5)
            m = _shape_mask(g, top, left, h, w, blob)
            if m.any() and not (m & occupied).any():
                occupied |= m
                masks.append(m.reshape(-1))
                break
        else:
            return None
    return masks


def generate_scene(config: SceneConfig, codebooks: Codebooks, rng, max_restarts=50):
    """One (FeatureGrid, SceneSpec, QuerySet) triple; pure function of the rng state."""
    g = config.grid
    n_obj = int(rng.integers(config.min_objects, config.max_objects + 1))
    for _ in range(max_restarts):
        masks = _place_objects(config, n_obj, rng)
        if masks is not None:
            break
    else:
        raise GenerationError(f"could not place {n_obj} non-overlapping objects on a {g}x{g} grid")

    coords = patch_coords(g)
    cats = rng.integers(0, config.n_categories, size=n_obj)
    appearance = np.tile(codebooks.background, (g * g, 1))
    objects = []
    for m, c in zip(masks, cats):
        appearance[m] = codebooks.feature.codes[c]
        objects.append(SceneObject(int(c), m, f32(coords[m].mean(axis=0))))
    appearance = appearance + config.noise * rng.standard_normal(appearance.shape)
    feats = f32(np.concatenate([appearance, coords], axis=1))

    m_max = n_obj if config.max_queries is None else min(n_obj, config.max_queries)
    m = int(rng.integers(1, m_max + 1))
    chosen = rng.permutation(n_obj)[:m]
    queries = QuerySet(
        # rounded like every stored float so datasets survive the f32 file format
        f32(codebooks.conditioning.codes[cats[chosen]]),
        np.stack([objects[i].center for i in chosen]),
        chosen,
    )
    return FeatureGrid(g, feats), SceneSpec(g, objects), queries


def generate_dataset(config, codebooks, n, seed):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xDA7A]))
    return [Sample(*generate_scene(config, codebooks, rng)) for _ in range(n)]


# --- validation ----------------------------------------------------------

def validate_sample(sample: Sample, index=None, atol=1e-5):
    scene = sample.scene
    k = scene.grid * scene.grid
    if sample.features.n_patches != k:
        raise ValidationError(f"feature rows {sample.features.n_patches} != grid^2 {k}", index)
    if not np.all(np.isfinite(sample.features.data)):
        raise ValidationError("non-finite feature entries", index)
    masks = scene.object_masks
    if masks.shape[0] and (masks.sum(axis=0) > 1).any():
        raise ValidationError("object masks overlap", index)
    coords = patch_coords(scene.grid)
    for j, o in enumerate(scene.objects):
        if not o.mask.any():
            raise ValidationError(f"object {j} has an empty mask", index)
        if np.any(o.center < 0) or np.any(o.center > 1):
            raise ValidationError(f"object {j} centroid outside the unit square", index)
        if not np.allclose(o.center, coords[o.mask].mean(axis=0), atol=atol):
            raise ValidationError(f"object {j} centroid does not match its mask", index)
    q = sample.queries
    if len(q) and (q.gt_object_ids.min() < 0 or q.gt_object_ids.max() >= len(scene.objects)):
        raise ValidationError("query references a missing object", index)


# --- binary format -------------------------------------------------------

def _encode_sample(s: Sample):
    g = s.scene.grid
    k = g * g
    parts = [struct.pack("<III", g, s.features.dim, len(s.scene.objects))]
    parts.append(s.features.data.astype("<f4").tobytes())
    for o in s.scene.objects:
        parts.append(struct.pack("<I", o.category))
        parts.append(np.asarray(o.center, dtype="<f4").tobytes())
        parts.append(np.packbits(o.mask.astype(np.uint8), bitorder="little").tobytes())
    q = s.queries
    parts.append(struct.pack("<I", len(q)))
    for j in range(len(q)):
        code = q.lang_codes[j]
        parts.append(struct.pack("<II", int(q.gt_object_ids[j]), code.size))
        parts.append(code.astype("<f4").tobytes())
        if q.points is None:
            parts.append(b"\x00")
        else:
            parts.append(b"\x01" + q.points[j].astype("<f4").tobytes())
    assert k == s.features.n_patches
    return b"".join(parts)


def dumps(dataset):
    head = MAGIC + struct.pack("<IQ", VERSION, len(dataset))
    return head + b"".join(_encode_sample(s) for s in dataset)


def write_features(dataset, path):
    for i, s in enumerate(dataset):
        validate_sample(s, i)
    with open(path, "wb") as fh:
        fh.write(dumps(dataset))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}: need {n} bytes, "
                              f"{len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def floats(self, n, what):
        return np.frombuffer(self.take(4 * n, what), dtype="<f4").astype(np.float64)


def loads(buf, validate=True):
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version, n = r.unpack("<IQ", "header")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    out = []
    for i in range(n):
        start = r.pos
        g, d, n_obj = r.unpack("<III", f"sample {i} header")
        if g == 0 or d == 0:
            raise FormatError(f"sample {i}: zero grid or feature width", start)
        k = g * g
        feats = r.floats(k * d, f"sample {i} features").reshape(k, d)
        nbytes = (k + 7) // 8
        objects = []
        for _ in range(n_obj):
            (cat,) = r.unpack("<I", f"sample {i} object")
            center = r.floats(2, f"sample {i} centroid")
            bits = np.frombuffer(r.take(nbytes, f"sample {i} mask"), dtype=np.uint8)
            mask = np.unpackbits(bits, bitorder="little")[:k].astype(bool)
            objects.append(SceneObject(int(cat), mask, center))
        (m,) = r.unpack("<I", f"sample {i} query count")
        codes, ids, pts, has = [], [], [], []
        for _ in range(m):
            obj, d_emb = r.unpack("<II", f"sample {i} query")
            codes.append(r.floats(d_emb, f"sample {i} query code"))
            ids.append(obj)
            flag = r.take(1, f"sample {i} point flag")[0]
            if flag not in (0, 1):
                raise FormatError(f"sample {i}: bad has_point flag {flag}", r.pos - 1)
            has.append(flag)
            pts.append(r.floats(2, f"sample {i} point") if flag else np.zeros(2))
        if len(set(has)) > 1:
            raise FormatError(f"sample {i}: mixed has_point flags are not supported", start)
        if len({c.size for c in codes}) > 1:
            raise FormatError(f"sample {i}: query codes of different widths", start)
        d_emb = codes[0].size if codes else 0
        q = QuerySet(np.array(codes).reshape(m, d_emb), np.array(pts).reshape(m, 2) if (has and has[0]) else None,
                     np.array(ids, dtype=np.int64))
        s = Sample(FeatureGrid(g, feats), SceneSpec(g, objects), q)
        if validate:
            validate_sample(s, i)
        out.append(s)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after {n} samples", r.pos)
    return out


def ingest_features(path, validate=True):
    with open(path, "rb") as fh:
        return loads(fh.read(), validate)
