"""Slot Attention whose first M slots are initialized from control queries.

Arrays carry a leading batch axis: inputs (B, K, D_in), slots (B, N, D_slot),
query vectors padded to (B, N, D_query) with a boolean ``cond_mask`` (B, N)
marking the conditioned rows. Unbatched (K, D_in) / (M, D_query) inputs are
accepted by :func:`run_slot_attention` and promoted to B = 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import layers as L
from .errors import ContractError, ShapeError

INIT_MODES = ("assign", "add", "none")


@dataclass
class SlotState:
    slots: dc.Tensor  # (B, N, D_slot)
    attn: dc.Tensor  # (B, N, K), last iteration, softmax over slots
    conditioned_count: np.ndarray  # (B,)


def init_slot_attention(rng, d_inputs, d_slot=64, d_attn=64, d_query=64, mlp_hidden=128):
    return {
        "norm_inputs": L.init_layer_norm(d_inputs),
        "norm_slots": L.init_layer_norm(d_slot),
        "norm_mlp": L.init_layer_norm(d_slot),
        "k": L.init_linear(rng, d_inputs, d_attn, bias=False),
        "q": L.init_linear(rng, d_slot, d_attn, bias=False),
        "v": L.init_linear(rng, d_inputs, d_slot, bias=False),
        "query_proj": L.init_linear(rng, d_query, d_slot),
        "gru": L.init_gru(rng, d_slot, d_slot),
        "mlp": L.init_mlp(rng, [d_slot, mlp_hidden, d_slot]),
        "slot_mu": dc.param(rng.standard_normal(d_slot) * d_slot ** -0.5),
        "slot_log_sigma": dc.param(np.full(d_slot, np.log(d_slot ** -0.5))),
    }


def pad_queries(query_vecs, n_slots):
    """Stack per-sample (M_b, D) query vectors into (B, N, D) plus a (B, N) mask."""
    d = next((q.shape[-1] for q in query_vecs if q is not None and q.shape[0]), 0)
    b = len(query_vecs)
    out = np.zeros((b, n_slots, d))
    mask = np.zeros((b, n_slots), dtype=bool)
    for i, q in enumerate(query_vecs):
        m = 0 if q is None else q.shape[0]
        if m > n_slots:
            raise ContractError(f"sample {i}: {m} queries exceed {n_slots} slots")
        if m:
            out[i, :m] = q
            mask[i, :m] = True
    return out, mask


def sample_noise(rng, batch, n_slots, d_slot):
    return rng.standard_normal((batch, n_slots, d_slot))


def init_slots(params, query_vecs, cond_mask, noise, init_mode="assign"):
    """Initial slots (B, N, D_slot).

    Conditioned rows get ``p(query)`` (``assign``) or Gaussian sample plus
    ``p(query)`` (``add``); ``none`` ignores the queries. Free rows are
    ``mu + exp(log_sigma) * noise``.
    """
    if init_mode not in INIT_MODES:
        raise ContractError(f"init_mode must be one of {INIT_MODES}")
    gauss = params["slot_mu"] + dc.exp(params["slot_log_sigma"]) * noise
    if init_mode == "none" or not np.any(cond_mask):
        return gauss
    m = cond_mask[..., None].astype(np.float64)
    proj = L.apply_linear(query_vecs, params["query_proj"]) * m
    if init_mode == "add":
        return gauss + proj
    return gauss * (1.0 - m) + proj


def attention_logits(slots, k, params):
    q = L.apply_linear(L.apply_layer_norm(slots, params["norm_slots"]), params["q"])
    scale = q.shape[-1] ** -0.5
    return dc.matmul(q, dc.swapaxes(k, -1, -2)) * scale


def weighted_mean_weights(attn, eps=dc.ATTN_EPS):
    """Per-slot weights over patches: (a + eps) / sum_k (a + eps)."""
    a = attn + eps
    return a / a.sum(axis=-1, keepdims=True)


def attention_step(slots, inputs, params, kv=None, eps=dc.ATTN_EPS):
    """One refinement step; ``inputs`` must already be layer-normalized.

    Returns (new_slots, attn) with attn (B, N, K) normalized over slots.
    """
    slots, inputs = dc.as_tensor(slots), dc.as_tensor(inputs)
    if slots.ndim != inputs.ndim or slots.shape[:-2] != inputs.shape[:-2]:
        raise ShapeError(f"slots {slots.shape} and inputs {inputs.shape} have different batch dims")
    if kv is None:
        kv = (L.apply_linear(inputs, params["k"]), L.apply_linear(inputs, params["v"]))
    k, v = kv
    attn = dc.softmax(attention_logits(slots, k, params), axis=-2)
    updates = dc.matmul(weighted_mean_weights(attn, eps), v)
    new = dc.gru_cell(slots, updates, params["gru"])
    new = new + L.apply_mlp(L.apply_layer_norm(new, params["norm_mlp"]), params["mlp"])
    return new, attn


def run_slot_attention(inputs, query_vecs, cond_mask, params, n_iters=3, rng=None, noise=None,
                       init_mode="assign"):
    """Full refinement loop; returns a :class:`SlotState` with last-iteration attention."""
    if n_iters < 1:
        raise ContractError("n_iters must be >= 1")
    inputs = dc.as_tensor(inputs)
    unbatched = inputs.ndim == 2
    if unbatched:
        inputs = inputs.reshape(1, *inputs.shape)
        if query_vecs is not None:
            query_vecs = np.asarray(query_vecs)[None]
        if cond_mask is not None:
            cond_mask = np.asarray(cond_mask)[None]
    b = inputs.shape[0]
    if noise is None:
        if rng is None:
            raise ContractError("either rng or explicit noise is required")
        n_slots = cond_mask.shape[1]
        noise = sample_noise(rng, b, n_slots, params["slot_mu"].shape[0])
    noise = np.asarray(noise)
    if noise.ndim == 2:
        noise = noise[None]
    if cond_mask is None:
        cond_mask = np.zeros(noise.shape[:2], dtype=bool)
    if cond_mask.shape != noise.shape[:2]:
        raise ShapeError(f"cond_mask {cond_mask.shape} does not match slot layout {noise.shape[:2]}")

    x = L.apply_layer_norm(inputs, params["norm_inputs"])
    kv = (L.apply_linear(x, params["k"]), L.apply_linear(x, params["v"]))
    slots = init_slots(params, query_vecs, cond_mask, noise, init_mode)
    attn = None
    for _ in range(n_iters):
        slots, attn = attention_step(slots, x, params, kv=kv)
    return SlotState(slots, attn, cond_mask.sum(axis=1))
