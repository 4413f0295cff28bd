"""Indexed-color PPM rasters of predicted and ground-truth patch masks."""
from __future__ import annotations

import os

import numpy as np

from . import metrics as M
from .training import predict_masks

# qualitative palette; index 0 is reserved for ground-truth background
PALETTE = np.array([
    [20, 20, 20], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
    [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212], [0, 128, 128],
    [220, 190, 255], [170, 110, 40], [255, 250, 200], [128, 0, 0], [170, 255, 195], [128, 128, 0],
], dtype=np.uint8)


def _color(i):
    if i < len(PALETTE):
        return PALETTE[i]
    # deterministic fallback for very large slot counts
    r = np.random.default_rng(i)
    return r.integers(40, 256, size=3).astype(np.uint8)


def ppm_bytes(index_grid, comments=(), cell=8):
    """P6 image of an integer (G, G) grid; each value maps to one color."""
    grid = np.asarray(index_grid)
    if grid.ndim != 2:
        raise ValueError(f"expected a 2-D index grid, got shape {grid.shape}")
    lut = np.stack([_color(i) for i in range(int(grid.max(initial=0)) + 1)])
    img = lut[grid].repeat(cell, axis=0).repeat(cell, axis=1)
    h, w = img.shape[:2]
    head = "P6\n" + "".join(f"# {c}\n" for c in comments) + f"{w} {h}\n255\n"
    return head.encode("ascii") + img.tobytes()


def read_ppm(buf):
    """(pixels (H, W, 3), comments) from P6 bytes written by :func:`ppm_bytes`."""
    pos, tokens, comments = 0, [], []
    lines = buf.split(b"\n")
    for line in lines:
        pos += len(line) + 1
        if line.startswith(b"#"):
            comments.append(line[1:].strip().decode("ascii"))
            continue
        tokens.extend(line.split())
        if len(tokens) >= 4:
            break
    if tokens[0] != b"P6":
        raise ValueError("not a P6 pixmap")
    w, h = int(tokens[1]), int(tokens[2])
    px = np.frombuffer(buf[pos:pos + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return px, comments


def scene_rasters(pred_labels, sample, n_slots, cell=8, conditioned=True):
    """(pred bytes, gt bytes). Predicted pixels use color ``slot + 1``,
    ground truth uses ``object + 1`` with 0 for background."""
    g = sample.scene.grid
    notes = []
    if conditioned:
        cats = sample.categories_of_queries()
        notes = [f"slot {j} conditioned category {int(c)} object {int(o)}"
                 for j, (c, o) in enumerate(zip(cats, sample.queries.gt_object_ids))]
    pred = ppm_bytes(np.asarray(pred_labels).reshape(g, g) + 1, [f"pred n_slots {n_slots}", *notes], cell)
    gt_notes = [f"object {i} category {o.category}" for i, o in enumerate(sample.scene.objects)]
    gt = ppm_bytes(sample.scene.labels().reshape(g, g) + 1, ["ground truth", *gt_notes], cell)
    return pred, gt


def render_masks(params, config, samples, out_dir, cell=8):
    """Write ``scene_XXXX_pred.ppm`` and ``scene_XXXX_gt.ppm`` per sample; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    soft, _ = predict_masks(params, config, list(samples))
    paths = []
    for i, (s, sm) in enumerate(zip(samples, soft)):
        labels = M.MaskSet(M.hard_masks(sm)).labels()
        pred, gt = scene_rasters(labels, s, config.n_slots, cell, config.use_queries)
        for tag, data in (("pred", pred), ("gt", gt)):
            p = os.path.join(out_dir, f"scene_{i:04d}_{tag}.ppm")
            with open(p, "wb") as fh:
                fh.write(data)
            paths.append(p)
    return paths
