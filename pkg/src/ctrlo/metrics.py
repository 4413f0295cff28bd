"""Object discovery and grounding metrics on patch masks.

Masks are boolean arrays over the K patches. Predicted masks come from a
hard per-patch argmax over slots, so they partition the grid.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError, ShapeError


@dataclass
class MaskSet:
    masks: np.ndarray  # (n_masks, K) bool
    origin: str = "predicted"

    def __post_init__(self):
        self.masks = np.atleast_2d(np.asarray(self.masks, dtype=bool))

    def __len__(self):
        return self.masks.shape[0]

    @classmethod
    def from_labels(cls, labels, n_masks=None, origin="predicted"):
        """One mask per label value 0..n_masks-1; negative labels belong to none."""
        labels = np.asarray(labels)
        n = int(labels.max()) + 1 if n_masks is None else n_masks
        return cls(labels[None, :] == np.arange(n)[:, None], origin)

    def labels(self):
        lab = np.full(self.masks.shape[1], -1, dtype=np.int64)
        for i, m in enumerate(self.masks):
            lab[m] = i
        return lab


def hard_masks(soft_masks):
    """(N, K) soft masks -> (N, K) boolean argmax partition, ties to the lowest slot."""
    soft_masks = np.asarray(soft_masks)
    lab = np.argmax(soft_masks, axis=0)
    return lab[None, :] == np.arange(soft_masks.shape[0])[:, None]


def iou(a, b):
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"iou: mask shapes differ {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def iou_matrix(pred, gt):
    """(n_pred, n_gt) IoU table; empty-vs-empty pairs score 1."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape[1] != g.shape[1]:
        raise ShapeError("iou_matrix: masks cover different numbers of patches")
    inter = p @ g.T
    union = p.sum(1)[:, None] + g.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 1.0)
    return out


def _masks(x):
    return x.masks if isinstance(x, MaskSet) else np.atleast_2d(np.asarray(x, dtype=bool))


def ari_from_labels(pred_labels, true_labels):
    """Adjusted Rand index of two labelings via the contingency table.

    Returns (value, degenerate) where degenerate flags the 0/0 cases
    (fewer than two points, or both labelings a single cluster), scored 1.
    """
    pred_labels = np.asarray(pred_labels)
    true_labels = np.asarray(true_labels)
    n = pred_labels.size
    if n < 2:
        return 1.0, True
    _, pi = np.unique(pred_labels, return_inverse=True)
    _, ti = np.unique(true_labels, return_inverse=True)
    table = np.zeros((pi.max() + 1, ti.max() + 1))
    np.add.at(table, (pi, ti), 1)
    pairs = lambda x: (x * (x - 1)).sum() / 2.0
    index = pairs(table)
    a = pairs(table.sum(1))
    b = pairs(table.sum(0))
    total = n * (n - 1) / 2.0
    expected = a * b / total
    max_index = (a + b) / 2.0
    if max_index == expected:
        return 1.0, True
    return (index - expected) / (max_index - expected), False


def fg_ari(pred, gt, foreground=None, return_flag=False):
    """ARI between predicted and gt object labelings over foreground patches."""
    p, g = _masks(pred), _masks(gt)
    if p.shape[1] != g.shape[1]:
        raise ShapeError("fg_ari: predicted and gt masks cover different patch counts")
    fg = g.any(axis=0) if foreground is None else np.asarray(foreground, dtype=bool)
    if not fg.any():
        warnings.warn("fg_ari: empty foreground, scoring 1", RuntimeWarning, stacklevel=2)
        return (1.0, True) if return_flag else 1.0
    val, degenerate = ari_from_labels(MaskSet(p).labels()[fg], MaskSet(g).labels()[fg])
    return (val, degenerate) if return_flag else val


def mbo(pred, gt):
    """Mean over gt object masks of the best IoU with any predicted mask."""
    p, g = _masks(pred), _masks(gt)
    if g.shape[0] == 0:
        raise ContractError("mbo needs at least one ground-truth mask")
    return float(iou_matrix(p, g).max(axis=0).mean())


def _is_hit(table, slot, obj, mode):
    col = table[:, obj]
    best = col.max()
    if col[slot] != best or np.count_nonzero(col == best) != 1:
        return False
    if mode == "mutual":
        row = table[slot]
        return row[obj] == row.max() and np.count_nonzero(row == row.max()) == 1
    return True


def binding_hits(pred, gt, bindings, mode="unique_argmax"):
    """Fraction of (slot, gt object) bindings whose slot is the unique best
    predicted mask for that object. ``mode="mutual"`` also requires the
    object to be the slot's unique best gt mask."""
    if mode not in ("unique_argmax", "mutual"):
        raise ContractError(f"unknown binding-hits mode {mode!r}")
    bindings = list(bindings)
    if not bindings:
        raise ContractError("binding_hits needs at least one binding")
    p, g = _masks(pred), _masks(gt)
    table = iou_matrix(p, g)
    for s, o in bindings:
        if not (0 <= s < p.shape[0] and 0 <= o < g.shape[0]):
            raise ContractError(f"binding ({s}, {o}) references a missing mask")
    hits = sum(_is_hit(table, s, o, mode) for s, o in bindings)
    return hits / len(bindings)


def binding_hit_count(pred, gt, bindings, mode="unique_argmax"):
    bindings = list(bindings)
    if not bindings:
        return 0, 0
    return int(round(binding_hits(pred, gt, bindings, mode) * len(bindings))), len(bindings)


def miou(pairs):
    pairs = list(pairs)
    if not pairs:
        raise ContractError("miou needs at least one pair")
    return float(np.mean([iou(a, b) for a, b in pairs]))


@dataclass
class MetricsReport:
    fg_ari: float
    mbo: float
    binding_hits: float
    miou: float
    n_samples: int
    n_bindings: int = 0
    binding_baseline: float = float("nan")
    fg_ari_degenerate: int = 0

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ContractError("a metrics report needs at least one sample")

    def to_dict(self):
        return asdict(self)

    def to_text(self):
        return (f"samples        {self.n_samples}\n"
                f"FG-ARI         {self.fg_ari:.4f}\n"
                f"mBO            {self.mbo:.4f}\n"
                f"Binding Hits   {self.binding_hits:.4f}  ({self.n_bindings} bindings)\n"
                f"  random base  {self.binding_baseline:.4f}\n"
                f"mIoU           {self.miou:.4f}\n"
                f"degenerate FG  {self.fg_ari_degenerate}\n")
