from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctrlo import diffcore as dc
from ctrlo import grounding as G
from ctrlo import layers as L
from ctrlo.errors import ContractError, NumericError, ShapeError


def _params(seed=0, d_in=5, d_emb=4, hidden=6):
    return G.init_grounding(np.random.default_rng(seed), d_in, d_emb, hidden)


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def test_aggregate_uniform_and_one_hot(rng):
    h = rng.standard_normal((6, 3))
    uni = np.full((2, 6), 0.5)
    np.testing.assert_allclose(G.aggregate_slot_features(uni, h, 0).data, h.mean(0), atol=1e-14)
    one = np.zeros((2, 6))
    one[1, 4] = 1.0
    z = G.aggregate_slot_features(one, h, 1).data
    # eps leaves a 1e-8 share on the other patches
    np.testing.assert_allclose(z, h[4], atol=1e-7)


def test_aggregate_matches_double_loop(rng):
    attn = rng.uniform(0, 1, (3, 7))
    h = rng.standard_normal((7, 4))
    z = G.aggregate_slot_features(attn, h).data
    for i in range(3):
        tot = sum(attn[i, k] + 1e-8 for k in range(7))
        want = np.zeros(4)
        for k in range(7):
            want += (attn[i, k] + 1e-8) / tot * h[k]
        np.testing.assert_allclose(z[i], want, atol=1e-14)
        np.testing.assert_allclose(G.aggregate_slot_features(attn, h, i).data, want, atol=1e-14)
    with pytest.raises(ShapeError):
        G.aggregate_slot_features(attn, h, 3)


def test_project_embedding_unit_norm(rng):
    p = _params()
    e = G.project_embedding(dc.as_tensor(rng.standard_normal((9, 5))), p["head_lang"]).data
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-10)


def test_linear_head_scale_invariance(rng):
    head = {"0": L.init_linear(rng, 5, 4, bias=False)}
    z = rng.standard_normal((3, 5))
    a = G.project_embedding(dc.as_tensor(z), head).data
    b = G.project_embedding(dc.as_tensor(2 * z), head).data
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_heads_are_disjoint(rng):
    p = _params()
    z = dc.as_tensor(rng.standard_normal((2, 5)))
    a = G.project_embedding(z, p["head_lang"]).data
    p["head_point"]["0"]["w"].data += 1.0
    b = G.project_embedding(z, p["head_lang"]).data
    np.testing.assert_array_equal(a, b)


def test_zero_norm_is_diagnosed():
    head = {"0": {"w": dc.param(np.zeros((3, 2)))}}
    with pytest.raises(NumericError, match="zero-norm"):
        G.project_embedding(dc.as_tensor(np.ones((1, 3))), head)


def test_single_target_gives_zero(rng):
    z = dc.as_tensor(_unit(rng.standard_normal((1, 4))))
    t = _unit(rng.standard_normal((1, 4)))
    assert G.contrastive_loss(z, [0], t).data == 0.0


def test_uniform_logits_give_m_log_t(rng):
    # targets orthogonal to every embedding: all logits 0
    z = dc.as_tensor(np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]]))
    t = np.array([[0, 0, 1.0, 0], [0, 0, 0, 1.0], [0, 0, -1.0, 0]])
    loss = G.contrastive_loss(z, [0, 2], t).data
    assert abs(loss - 2 * np.log(3)) < 1e-14


def test_extended_precision_oracle(rng):
    z = _unit(rng.standard_normal((2, 5)))
    t = _unit(rng.standard_normal((3, 5)))
    pos = [2, 0]
    got = G.contrastive_loss(dc.as_tensor(z), pos, t, tau=0.1).data
    getcontext().prec = 50
    want = Decimal(0)
    for i in range(2):
        logits = [sum(Decimal(float(a)) * Decimal(float(b)) for a, b in zip(z[i], t[j])) / Decimal("0.1")
                  for j in range(3)]
        lse = sum(x.exp() for x in logits).ln()
        want += lse - logits[pos[i]]
    assert abs(got - float(want)) < 1e-12


def test_contrastive_errors(rng):
    z = dc.as_tensor(_unit(rng.standard_normal((2, 4))))
    with pytest.raises(ContractError):
        G.contrastive_loss(z, [0, 1], np.zeros((0, 4)))
    with pytest.raises(ContractError):
        G.contrastive_loss(z, [0, 5], _unit(rng.standard_normal((3, 4))))
    with pytest.raises(ContractError):
        G.contrastive_loss(z, [0], _unit(rng.standard_normal((3, 4))))
    with pytest.raises(ContractError):
        G.contrastive_loss(z, [0, 1], _unit(rng.standard_normal((3, 4))), tau=0.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31), m=st.integers(1, 4), extra=st.integers(0, 3))
def test_loss_nonnegative_and_monotone(seed, m, extra):
    r = np.random.default_rng(seed)
    t = _unit(r.standard_normal((m + extra, 8)))
    z = _unit(r.standard_normal((m, 8)))
    pos = np.arange(m)
    base = G.contrastive_loss(dc.as_tensor(z), pos, t).data
    assert base >= 0
    # push z_0 along the part of its positive orthogonal to every negative:
    # only the positive similarity grows
    neg = np.delete(t, 0, axis=0)
    u = t[0] - (neg.T @ np.linalg.lstsq(neg.T, t[0], rcond=None)[0] if len(neg) else 0.0)
    z2 = z.copy()
    z2[0] += 0.3 * u
    np.testing.assert_allclose(z2[0] @ neg.T, z[0] @ neg.T, atol=1e-12)
    bumped = G.contrastive_loss(dc.as_tensor(z2), pos, t).data
    if len(t) == 1:
        assert bumped == base == 0.0
    else:
        assert bumped < base


def _scene(rng, n=3, k=6, d=5):
    attn = rng.uniform(0.1, 1.0, (2, n, k))
    attn /= attn.sum(1, keepdims=True)
    mapped = rng.standard_normal((2, k, d))
    mask = np.array([[True, True, False], [True, False, False]])
    lang = _unit(rng.standard_normal((3, 4)))
    pts = rng.uniform(0, 1, (3, 2))
    return attn, mapped, mask, lang, pts


def test_dual_is_sum_of_parts(rng):
    p = _params()
    attn, mapped, mask, lang, pts = _scene(rng)
    pt = G.point_targets(pts, p)
    dual = G.dual_contrastive(attn, mapped, lang, pt, p, mask).data
    z = G.conditioned_features(attn, mapped, mask)
    ll = G.contrastive_loss(G.project_embedding(z, p["head_lang"]), np.arange(3), lang).data
    lp = G.contrastive_loss(G.project_embedding(z, p["head_point"]), np.arange(3), pt).data
    assert dual == ll + lp
    only_lang = G.dual_contrastive(attn, mapped, lang, None, p, mask).data
    assert only_lang == ll


def test_dual_zero_with_single_target(rng):
    p = _params()
    attn, mapped, _, lang, pts = _scene(rng)
    mask = np.zeros((2, 3), bool)
    mask[0, 1] = True
    assert G.dual_contrastive(attn, mapped, lang[:1], G.point_targets(pts[:1], p), p, mask).data == 0.0


def test_dual_misaligned(rng):
    p = _params()
    attn, mapped, mask, lang, pts = _scene(rng)
    with pytest.raises(ContractError):
        G.dual_contrastive(attn, mapped, lang, G.point_targets(pts[:2], p), p, mask)
    with pytest.raises(ContractError):
        G.dual_contrastive(attn, mapped, lang[:2], None, p, mask)


def test_loss_depends_only_on_attention_and_features():
    # production wiring: the contrastive term is a function of (attention, mapped features) alone
    from ctrlo import model
    from conftest import tiny_config
    from test_model import _tiny_batch
    cfg = tiny_config()
    params = model.init_params(cfg, n_positions=8)
    batch = _tiny_batch(cfg)
    noise = np.random.default_rng(3).standard_normal((2, cfg.n_slots, cfg.d_slot))
    _, parts, out = model.compute_loss(batch, params, cfg, noise=noise)
    gp = params["grounding"]
    want = G.dual_contrastive(out.slots.attn.data, out.mapped.data, batch.targets,
                              G.point_targets(batch.flat_points, gp), gp, batch.cond_mask).data / batch.size
    assert abs(parts["contrastive"] - want) < 1e-12
    # perturbing the slot vectors after attention (the decoder side) leaves it alone
    for t in L.flatten(params["decoder"]).values():
        t.data += 0.5
    _, parts2, out2 = model.compute_loss(batch, params, cfg, noise=noise)
    assert parts2["recon"] != parts["recon"] and parts2["contrastive"] == parts["contrastive"]


def test_embed_point(rng):
    p = _params()
    a = G.embed_point(np.array([0.3, 0.7]), p).data
    np.testing.assert_array_equal(a, G.embed_point(np.array([0.3, 0.7]), p).data)
    for t in L.flatten(p["point_mlp"]).values():
        t.data[...] = 0.0
    p["point_mlp"]["1"]["b"].data[:] = [1.0, 2.0, 3.0, 4.0]
    out = G.embed_point(rng.uniform(0, 1, (5, 2)), p).data
    np.testing.assert_array_equal(out, np.tile([1.0, 2.0, 3.0, 4.0], (5, 1)))
    with pytest.raises(ShapeError):
        G.embed_point(np.array([1.2, 0.5]), p)
    with pytest.raises(ShapeError):
        G.embed_point(np.array([0.2, 0.5, 0.1]), p)


def test_embed_point_gradients(rng):
    p = _params()
    pts = rng.uniform(0, 1, (3, 2))
    w = rng.standard_normal((3, 4))
    point = {k: v.data.copy() for k, v in L.flatten(p["point_mlp"]).items()}
    f = lambda v: (G.embed_point(pts, {"point_mlp": L.unflatten(v)}) * dc.Tensor(w)).sum()
    assert dc.grad_check(f, point) < 1e-4


def test_build_query(rng):
    p = _params()
    lang = _unit(rng.standard_normal((2, 4)))
    same_cat = np.stack([lang[0], lang[0]])
    q = G.build_query(same_cat, np.array([[0.1, 0.2], [0.8, 0.9]]), p).data
    assert q.shape == (2, 8)
    assert not np.allclose(q[0], q[1])
    q0 = G.build_query(lang, None, p).data
    np.testing.assert_array_equal(q0[:, 4:], np.tile(p["no_point"].data, (2, 1)))
    np.testing.assert_array_equal(q0[:, :4], lang)
