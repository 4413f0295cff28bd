"""Mapping network, query-conditioned broadcast decoder, losses and the
full forward pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import grounding
from . import layers as L
from .errors import ShapeError
from .slotattn import SlotState, init_slot_attention, run_slot_attention, sample_noise


# --- mapping network -----------------------------------------------------

def init_mapping(rng, d, n_blocks=3, n_heads=4, ff_mult=4):
    d_head = -(-d // n_heads)
    blocks = {}
    for i in range(n_blocks):
        blocks[str(i)] = {
            "ln1": L.init_layer_norm(d),
            "qkv": L.init_linear(rng, d, 3 * n_heads * d_head),
            "out": L.init_linear(rng, n_heads * d_head, d),
            "ln2": L.init_layer_norm(d),
            "ff": L.init_mlp(rng, [d, ff_mult * d, d]),
        }
    return {"blocks": blocks, "n_heads": n_heads}


def self_attention(x, p, n_heads):
    b, k, _ = x.shape
    qkv = L.apply_linear(x, p["qkv"])
    d_head = qkv.shape[-1] // (3 * n_heads)
    qkv = dc.transpose(qkv.reshape(b, k, 3, n_heads, d_head), (2, 0, 3, 1, 4))
    q, kk, v = qkv[0], qkv[1], qkv[2]  # (B, H, K, dh)
    w = dc.softmax(dc.matmul(q, dc.swapaxes(kk, -1, -2)) * d_head ** -0.5, axis=-1)
    o = dc.transpose(dc.matmul(w, v), (0, 2, 1, 3)).reshape(b, k, n_heads * d_head)
    return L.apply_linear(o, p["out"])


def map_features(h, params):
    """Pre-norm transformer encoder over the K patch tokens; shape preserved."""
    x = dc.as_tensor(h)
    unbatched = x.ndim == 2
    if unbatched:
        x = x.reshape(1, *x.shape)
    if x.ndim != 3:
        raise ShapeError(f"map_features expects (K, D) or (B, K, D), got {x.shape}")
    n_heads = params["n_heads"]
    for i in range(len(params["blocks"])):
        p = params["blocks"][str(i)]
        if x.shape[-1] != p["ln1"]["gamma"].shape[0]:
            raise ShapeError(f"token width {x.shape[-1]} does not match mapping network")
        x = x + self_attention(L.apply_layer_norm(x, p["ln1"]), p, n_heads)
        x = x + L.apply_mlp(L.apply_layer_norm(x, p["ln2"]), p["ff"])
    return x[0] if unbatched else x


# --- decoder -------------------------------------------------------------

def init_decoder(rng, d_slot, d_query, n_positions, d_feat, hidden=256, n_hidden=3):
    return {
        "cond_mlp": L.init_mlp(rng, [d_slot + d_query, d_slot, d_slot]),
        "pos": dc.param(rng.standard_normal((n_positions, d_slot)) * 0.02),
        "mlp": L.init_mlp(rng, [d_slot] + [hidden] * n_hidden + [d_feat + 1]),
        "null_query": dc.param(rng.standard_normal(d_query) * d_query ** -0.5),
    }


@dataclass
class DecoderOutput:
    recon_per_slot: dc.Tensor  # (B, N, K, D_feat)
    alpha: dc.Tensor  # (B, N, K)
    masks: dc.Tensor  # (B, N, K), softmax over slots
    recon: dc.Tensor  # (B, K, D_feat)


def decode(slots, query_vecs, cond_mask, params, conditioning=True):
    """Broadcast MLP decoder with per-slot query conditioning.

    Conditioned slots are concatenated with their query vector, the others
    (and every slot when ``conditioning`` is off) with the learned null query.
    """
    slots = dc.as_tensor(slots)
    b, n, _ = slots.shape
    null = params["null_query"]
    if conditioning and cond_mask is not None and np.any(cond_mask):
        m = np.asarray(cond_mask, dtype=np.float64)[..., None]
        qin = dc.as_tensor(query_vecs) * m + null * (1.0 - m)
    else:
        qin = dc.broadcast_to(null, (b, n, null.shape[0]))
    c = L.apply_mlp(dc.concat([slots, qin], axis=-1), params["cond_mlp"])
    k, d = params["pos"].shape
    x = c.reshape(b, n, 1, d) + params["pos"]
    out = L.apply_mlp(x, params["mlp"])
    d_feat = out.shape[-1] - 1
    recon_per_slot = out[..., :d_feat]
    alpha = out[..., d_feat]
    masks = dc.softmax(alpha, axis=1)
    recon = (masks.reshape(b, n, k, 1) * recon_per_slot).sum(axis=1)
    return DecoderOutput(recon_per_slot, alpha, masks, recon)


# --- losses --------------------------------------------------------------

def recon_loss(recon, target):
    """Mean squared error over every entry."""
    recon, target = dc.as_tensor(recon), dc.as_tensor(target)
    if recon.shape != target.shape:
        raise ShapeError(f"recon {recon.shape} vs target {target.shape}")
    diff = recon - target
    return (diff * diff).mean()


def total_loss(recon, contrastive, lam=1.0):
    return recon + lam * contrastive if lam else recon


# --- parameters and batches ----------------------------------------------

def init_params(config, seed=None, head_input="features", n_positions=None):
    """All trainable parameters for ``config``.

    ``head_input="slots"`` sizes the projection heads for raw slots; it
    exists only to reproduce the leakage failure mode in tests.
    """
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x9A7A]))
    d_in = config.d_feat
    return {
        "mapping": init_mapping(rng, d_in, config.map_blocks, config.map_heads, config.map_ff_mult),
        "slot_attn": init_slot_attention(rng, d_in, config.d_slot, config.d_attn, config.d_query,
                                         config.slot_mlp_hidden),
        "decoder": init_decoder(rng, config.d_slot, config.d_query, n_positions or config.grid ** 2, d_feat=config.d_feat,
                                hidden=config.dec_hidden, n_hidden=config.dec_layers),
        "grounding": grounding.init_grounding(rng, d_in, config.d_emb, config.head_hidden,
                                              d_head_in=config.d_slot if head_input == "slots" else None),
    }


def trainable(params):
    """Flat name -> Tensor view of the leaves (drops static entries like n_heads)."""
    return {k: v for k, v in L.flatten(params).items() if isinstance(v, dc.Tensor)}


@dataclass
class Batch:
    features: np.ndarray  # (B, K, D_feat)
    lang: np.ndarray  # (B, N, D_emb), zero padded
    points: np.ndarray  # (B, N, 2), zero padded
    cond_mask: np.ndarray  # (B, N)
    targets: np.ndarray  # (T, D_emb) contrastive language targets, batch-major
    gt_ids: list  # per sample, gt object index of each conditioned slot

    @property
    def size(self):
        return self.features.shape[0]

    @property
    def flat_points(self):
        return self.points[self.cond_mask]


def make_batch(samples, n_slots, target_codes=None, use_queries=True):
    """Pad samples into a :class:`Batch`.

    ``target_codes`` (C, D_emb) replaces each query's code by the code of its
    category in the contrastive targets (the distinct-codebook mode);
    ``use_queries=False`` drops all queries (the unconditioned pipeline).
    """
    b = len(samples)
    feats = np.stack([s.features.data for s in samples])
    d_emb = next((s.queries.lang_codes.shape[1] for s in samples if len(s.queries)),
                 samples[0].queries.lang_codes.shape[1] if samples else 1)
    lang = np.zeros((b, n_slots, d_emb))
    points = np.zeros((b, n_slots, 2))
    mask = np.zeros((b, n_slots), dtype=bool)
    targets, gt_ids = [], []
    for i, s in enumerate(samples):
        q = s.queries
        m = len(q) if use_queries else 0
        if m > n_slots:
            raise ShapeError(f"sample {i}: {m} queries for {n_slots} slots")
        if m:
            lang[i, :m] = q.lang_codes[:m]
        if m and q.points is not None:
            points[i, :m] = q.points[:m]
        mask[i, :m] = True
        gt_ids.append(q.gt_object_ids[:m].copy())
        if m:
            targets.append(q.lang_codes[:m] if target_codes is None
                           else target_codes[s.categories_of_queries()[:m]])
    targets = np.concatenate(targets) if targets else np.zeros((0, d_emb))
    return Batch(feats, lang, points, mask, targets, gt_ids)


# --- forward -------------------------------------------------------------

@dataclass
class ModelOutput:
    slots: SlotState
    recon_per_slot: dc.Tensor
    alpha: dc.Tensor
    masks: dc.Tensor
    recon: dc.Tensor
    mapped: dc.Tensor
    query_vecs: dc.Tensor | None


def forward_pass(batch, params, config, rng=None, noise=None):
    """map_features -> slot attention -> decoder for a padded batch."""
    mapped = map_features(batch.features, params["mapping"])
    b, n = batch.cond_mask.shape
    if noise is None:
        noise = sample_noise(rng, b, n, config.d_slot)
    query_vecs = None
    if batch.cond_mask.any():
        pts = batch.points if config.point_queries else None
        query_vecs = grounding.build_query(batch.lang, pts, params["grounding"])
    state = run_slot_attention(mapped, query_vecs, batch.cond_mask, params["slot_attn"], config.n_iters,
                               noise=noise, init_mode=config.slot_init)
    dec = decode(state.slots, query_vecs, batch.cond_mask, params["decoder"], config.decoder_conditioning)
    return ModelOutput(state, dec.recon_per_slot, dec.alpha, dec.masks, dec.recon, mapped, query_vecs)


def compute_loss(batch, params, config, rng=None, noise=None, contrastive_input="features"):
    """(total, {"recon", "contrastive", "total"}, ModelOutput).

    The contrastive term is summed over the conditioned slots of each sample
    and averaged over samples. ``contrastive_input="slots"`` feeds the raw
    slots to the heads instead of attention-pooled features (leakage wiring,
    tests only).
    """
    out = forward_pass(batch, params, config, rng, noise)
    rec = recon_loss(out.recon, batch.features)
    con = None
    if config.contrastive_loss and config.lam > 0 and batch.cond_mask.any():
        gp = params["grounding"]
        if contrastive_input == "slots":
            z = out.slots.slots[np.nonzero(batch.cond_mask)]
        else:
            z = grounding.conditioned_features(out.slots.attn, out.mapped, batch.cond_mask)
        pt = grounding.point_targets(batch.flat_points, gp) if config.point_queries else None
        con = grounding.features_contrastive(z, batch.targets, pt, gp, tau=config.tau) * (1.0 / batch.size)
    total = rec if con is None else total_loss(rec, con, config.lam)
    parts = {"recon": float(rec.data), "contrastive": 0.0 if con is None else float(con.data),
             "total": float(total.data)}
    return total, parts, out
