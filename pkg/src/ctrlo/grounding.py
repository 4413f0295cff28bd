"""Query construction, attention-weighted slot features and the control
contrastive loss (language-only and language + point regimes)."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from . import layers as L
from .errors import ContractError, NumericError, ShapeError

TAU = 0.1


def init_grounding(rng, d_inputs, d_emb=32, hidden=64, d_head_in=None):
    d_head_in = d_inputs if d_head_in is None else d_head_in
    return {
        "point_mlp": L.init_mlp(rng, [2, hidden, d_emb]),
        "head_lang": L.init_mlp(rng, [d_head_in, hidden, d_emb]),
        "head_point": L.init_mlp(rng, [d_head_in, hidden, d_emb]),
        "no_point": dc.param(rng.standard_normal(d_emb) * d_emb ** -0.5),
    }


def embed_point(points, params):
    """2-layer MLP embedding of (x, y) coordinates in the unit square."""
    pts = np.asarray(points.data if isinstance(points, dc.Tensor) else points, dtype=np.float64)
    if pts.shape[-1] != 2:
        raise ShapeError(f"points must have trailing dim 2, got {pts.shape}")
    if np.any(pts < 0) or np.any(pts > 1):
        raise ShapeError("point coordinates must lie in [0, 1]")
    return L.apply_mlp(points, params["point_mlp"])


def build_query(lang_codes, points, params):
    """Conditioning vectors concat(lang_code, point block), width 2 * D_emb.

    Without points the point block is the learned ``no_point`` vector.
    """
    lang = dc.as_tensor(lang_codes)
    if points is None:
        block = dc.broadcast_to(params["no_point"], lang.shape[:-1] + params["no_point"].shape)
    else:
        block = embed_point(points, params)
    return dc.concat([lang, block], axis=-1)


def aggregate_slot_features(attn, mapped, i=None, eps=dc.ATTN_EPS):
    """z_i = sum_k w_ik h'_k, with the same renormalized weights as the slot update.

    ``attn`` is (..., N, K), ``mapped`` (..., K, D). With ``i`` given returns
    that slot's vector only.
    """
    attn, mapped = dc.as_tensor(attn), dc.as_tensor(mapped)
    n = attn.shape[-2]
    if i is not None:
        if not 0 <= i < n:
            raise ShapeError(f"slot index {i} out of range for {n} slots")
        attn = attn[..., i:i + 1, :]
    a = attn + eps
    z = dc.matmul(a / a.sum(axis=-1, keepdims=True), mapped)
    return z if i is None else z[..., 0, :]


def normalize(x, what="embedding"):
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norm < 1e-12):
        raise NumericError(f"cannot unit-normalize {what}: zero-norm row at {np.argwhere(norm[..., 0] < 1e-12)[0].tolist()}")
    return x / dc.sqrt((x * x).sum(axis=-1, keepdims=True))


def project_embedding(z, head):
    """MLP head followed by unit normalization."""
    return normalize(L.apply_mlp(z, head), "projected slot feature")


def contrastive_loss(z_embs, positives, targets, tau=TAU):
    """-sum_i log softmax_t(z_i . target_t / tau)[positive_i]."""
    targets = dc.as_tensor(targets)
    if targets.shape[0] == 0:
        raise ContractError("contrastive loss needs at least one target")
    if not tau > 0:
        raise ContractError("temperature must be positive")
    positives = np.asarray(positives, dtype=np.int64)
    if positives.shape != (z_embs.shape[0],):
        raise ContractError("one positive index per embedding required")
    if positives.size and (positives.min() < 0 or positives.max() >= targets.shape[0]):
        raise ContractError("positive index out of range")
    logits = dc.matmul(z_embs, dc.transpose(targets)) * (1.0 / tau)
    logp = dc.log_softmax(logits, axis=-1)
    return -logp[np.arange(len(positives)), positives].sum()


def conditioned_features(attn, mapped, cond_mask):
    """Aggregated features of the conditioned slots, flattened over the batch.

    ``attn`` (B, N, K), ``mapped`` (B, K, D), ``cond_mask`` (B, N) -> (T, D)
    in batch-major order, matching the order of the flattened queries.
    """
    z = aggregate_slot_features(attn, mapped)
    return z[np.nonzero(np.asarray(cond_mask))]


def features_contrastive(z, lang_targets, point_targets, params, positives=None, tau=TAU):
    """L^l (+ L^p when ``point_targets`` is given) for features ``z`` (M, D)."""
    lang_targets = dc.as_tensor(lang_targets)
    if positives is None:
        positives = np.arange(z.shape[0])
    if point_targets is not None and point_targets.shape[0] != lang_targets.shape[0]:
        raise ContractError("language and point target sets are misaligned")
    loss = contrastive_loss(project_embedding(z, params["head_lang"]), positives, lang_targets, tau)
    if point_targets is not None:
        loss = loss + contrastive_loss(project_embedding(z, params["head_point"]), positives,
                                       point_targets, tau)
    return loss


def dual_contrastive(attn, mapped, lang_targets, point_targets, params, cond_mask=None, tau=TAU):
    """Control contrastive loss summed over every conditioned slot in the batch.

    Slot features come from the last-iteration attention over the mapped
    patch features, never from the slots themselves. Targets (T, D_emb) are
    aligned with the conditioned slots in batch-major order, so the positive
    of conditioned slot j is target j and every other target is a negative.
    """
    attn = dc.as_tensor(attn)
    if attn.ndim == 2:
        attn, mapped = attn.reshape(1, *attn.shape), dc.as_tensor(mapped).reshape(1, *mapped.shape)
    if cond_mask is None:
        cond_mask = np.zeros(attn.shape[:2], dtype=bool)
        cond_mask[:, :dc.as_tensor(lang_targets).shape[0]] = True
    if int(np.sum(cond_mask)) != dc.as_tensor(lang_targets).shape[0]:
        raise ContractError("number of conditioned slots does not match the number of targets")
    z = conditioned_features(attn, mapped, cond_mask)
    return features_contrastive(z, lang_targets, point_targets, params, tau=tau)


def point_targets(points, params):
    """Unit-normalized point embeddings used as L^p targets."""
    return normalize(embed_point(points, params), "point embedding")
