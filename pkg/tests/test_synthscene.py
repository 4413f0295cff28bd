import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctrlo.errors import ContractError, FormatError, GenerationError, ValidationError
from ctrlo.synthscene import (MAGIC, Codebooks, Codebook, FeatureGrid, QuerySet, Sample, SceneConfig,
                              SceneObject, SceneSpec, dumps, generate_dataset, generate_scene,
                              ingest_features, loads, make_codebook, make_codebooks, patch_coords,
                              validate_sample, write_features)


def test_codebook_single_and_norms(rng):
    one = make_codebook(1, 5, 0.9, rng)
    assert one.codes.shape == (1, 5)
    cb = make_codebook(12, 32, 0.3, rng)
    np.testing.assert_allclose(np.linalg.norm(cb.codes, axis=1), 1.0, atol=1e-12)
    cos = cb.codes @ cb.codes.T
    assert np.all(cos[~np.eye(12, dtype=bool)] <= 0.7 + 1e-6)


def test_codebook_near_orthogonal_pair(rng):
    cb = make_codebook(2, 2, 0.95, rng)
    assert cb.codes[0] @ cb.codes[1] <= 0.05 + 1e-6


def test_codebook_infeasible(rng):
    with pytest.raises(GenerationError):
        make_codebook(5, 2, 1.5, rng, max_tries=200)
    with pytest.raises(ContractError):
        make_codebook(0, 2, 0.1, rng)


def test_codebook_deterministic():
    a = make_codebook(6, 8, 0.3, np.random.default_rng(4))
    b = make_codebook(6, 8, 0.3, np.random.default_rng(4))
    np.testing.assert_array_equal(a.codes, b.codes)


def test_feature_and_query_codebooks_are_independent():
    # matched (feature, conditioning) pairs look like random pairs
    cfg = SceneConfig(n_categories=12, d_appearance=32, d_emb=32)
    matched, shuffled = [], []
    for seed in range(40):
        books = make_codebooks(cfg, seed)
        f, q = books.feature.codes, books.conditioning.codes
        matched.append(np.mean(np.sum(f * q, axis=1)))
        perm = np.random.default_rng(seed).permutation(12)
        shuffled.append(np.mean(np.sum(f * q[perm], axis=1)))
    # both centred on zero with the same spread (std of a mean of 12 cosines ~ 0.05)
    assert abs(np.mean(matched)) < 0.03 and abs(np.mean(shuffled)) < 0.03
    assert 0.5 < np.std(matched) / np.std(shuffled) < 2.0


def test_noise_free_full_cover_object():
    cfg = SceneConfig(grid=4, min_objects=1, max_objects=1, noise=0.0, min_size=4, max_size=4,
                      n_categories=3, d_appearance=6, d_emb=4)
    books = make_codebooks(cfg, 0)
    feats, scene, _ = generate_scene(cfg, books, np.random.default_rng(0))
    app = feats.data[:, :6]
    np.testing.assert_array_equal(app, np.tile(app[0], (16, 1)))
    np.testing.assert_allclose(feats.data[:, 6:], patch_coords(4), atol=1e-7)
    assert not scene.background.any()


def _check_scene(cfg, feats, scene, queries):
    k = cfg.grid ** 2
    assert feats.data.shape == (k, cfg.d_feat) and np.all(np.isfinite(feats.data))
    masks = scene.object_masks
    assert cfg.min_objects <= len(masks) <= cfg.max_objects
    assert masks.sum(axis=0).max() <= 1
    assert np.array_equal(masks.any(axis=0) | scene.background, np.ones(k, bool))
    coords = patch_coords(cfg.grid)
    for o in scene.objects:
        assert o.mask.any()
        np.testing.assert_allclose(o.center, coords[o.mask].mean(0), atol=1e-6)
    assert 1 <= len(queries) <= len(masks)
    assert len(set(queries.gt_object_ids.tolist())) == len(queries)


@pytest.mark.parametrize("family", ["rectangles", "blobs", "mixed"])
def test_scene_invariants_many_seeds(family):
    cfg = SceneConfig(grid=16, shape_family=family)
    books = make_codebooks(cfg, 1)
    n = 10_000 if family == "rectangles" else 1_000
    rng = np.random.default_rng(77)
    for _ in range(n):
        _check_scene(cfg, *generate_scene(cfg, books, rng))


def test_query_codes_are_conditioning_codes(small_world):
    cfg, books = small_world
    for s in generate_dataset(cfg, books, 20, seed=3):
        cats = s.categories_of_queries()
        np.testing.assert_allclose(s.queries.lang_codes, books.conditioning.codes[cats], atol=1e-7)
        for j, o in enumerate(s.queries.gt_object_ids):
            np.testing.assert_allclose(s.queries.points[j], s.scene.objects[o].center)


def test_generation_deterministic(small_world):
    cfg, books = small_world
    assert dumps(generate_dataset(cfg, books, 10, seed=4)) == dumps(generate_dataset(cfg, books, 10, seed=4))
    assert dumps(generate_dataset(cfg, books, 10, seed=4)) != dumps(generate_dataset(cfg, books, 10, seed=5))


def test_placement_failure():
    cfg = SceneConfig(grid=4, min_objects=5, max_objects=5, min_size=3, max_size=3)
    with pytest.raises(GenerationError):
        generate_scene(cfg, make_codebooks(cfg, 0), np.random.default_rng(0), max_restarts=3)


def test_roundtrip(tmp_path, small_dataset):
    p = tmp_path / "d.ctlo"
    write_features(small_dataset, p)
    back = ingest_features(p)
    assert dumps(back) == p.read_bytes()
    for a, b in zip(small_dataset, back):
        np.testing.assert_array_equal(a.features.data, b.features.data)
        np.testing.assert_array_equal(a.scene.object_masks, b.scene.object_masks)
        np.testing.assert_array_equal(a.queries.lang_codes, b.queries.lang_codes)
        np.testing.assert_array_equal(a.queries.points, b.queries.points)
        np.testing.assert_array_equal(a.queries.gt_object_ids, b.queries.gt_object_ids)
        assert [o.category for o in a.scene.objects] == [o.category for o in b.scene.objects]


def test_header_layout(small_dataset):
    buf = dumps(small_dataset[:2])
    assert buf[:4] == MAGIC == b"CTLO"
    assert struct.unpack("<IQ", buf[4:16]) == (1, 2)
    g, d, n_obj = struct.unpack("<III", buf[16:28])
    assert (g, d, n_obj) == (6, 10, len(small_dataset[0].scene.objects))
    feats = np.frombuffer(buf[28:28 + 4 * 36 * 10], dtype="<f4").reshape(36, 10)
    np.testing.assert_array_equal(feats, small_dataset[0].features.data)


def test_empty_dataset(tmp_path):
    p = tmp_path / "e.ctlo"
    write_features([], p)
    assert p.stat().st_size == 16
    assert ingest_features(p) == []


def test_truncated_everywhere(small_dataset):
    buf = dumps(small_dataset[:2])
    for cut in list(range(0, 40)) + list(range(40, len(buf), 97)) + [len(buf) - 1]:
        with pytest.raises(FormatError):
            loads(buf[:cut])


def test_bad_magic_version_and_trailing(small_dataset):
    buf = dumps(small_dataset[:1])
    with pytest.raises(FormatError, match="magic"):
        loads(b"XXXX" + buf[4:])
    with pytest.raises(FormatError, match="version"):
        loads(buf[:4] + struct.pack("<I", 9) + buf[8:])
    with pytest.raises(FormatError, match="trailing"):
        loads(buf + b"\0")


def test_overlap_names_sample(small_dataset):
    data = [s for s in small_dataset if len(s.scene.objects) >= 2][:1]
    bad = small_dataset[:2] + data
    s = bad[2]
    s2 = Sample(s.features, SceneSpec(s.scene.grid, [SceneObject(o.category, o.mask.copy(), o.center)
                                                      for o in s.scene.objects]), s.queries)
    s2.scene.objects[1].mask |= s2.scene.objects[0].mask
    bad[2] = s2
    from ctrlo.synthscene import _encode_sample
    buf = MAGIC + struct.pack("<IQ", 1, 3) + b"".join(_encode_sample(x) for x in bad)
    with pytest.raises(ValidationError, match="sample 2") as ei:
        loads(buf)
    assert ei.value.sample_index == 2
    with pytest.raises(ValidationError):
        write_features(bad, "/dev/null")


def test_rewrite_byte_identical(tmp_path, small_dataset):
    a, b = tmp_path / "a", tmp_path / "b"
    write_features(small_dataset, a)
    write_features(ingest_features(a), b)
    assert a.read_bytes() == b.read_bytes()


def test_queries_without_points_and_empty_queries(tmp_path, rng):
    g = 3
    objs = [SceneObject(1, np.eye(1, 9, 4, dtype=bool)[0], np.array([0.5, 0.5]))]
    feats = FeatureGrid(g, rng.standard_normal((9, 4)).astype(np.float32).astype(np.float64))
    s1 = Sample(feats, SceneSpec(g, objs), QuerySet(np.ones((1, 3)) * 0.5, None, [0]))
    s2 = Sample(feats, SceneSpec(g, objs), QuerySet(np.zeros((0, 3)), None, []))
    back = loads(dumps([s1, s2]))
    assert back[0].queries.points is None and len(back[1].queries) == 0
    assert dumps(back) == dumps([s1, s2])


def test_query_point_range():
    with pytest.raises(ContractError):
        QuerySet(np.ones((1, 2)), np.array([[1.5, 0.2]]), [0])


def test_validate_sample_catches_bad_centroid(small_dataset):
    s = small_dataset[0]
    o = s.scene.objects[0]
    bad = Sample(s.features, SceneSpec(s.scene.grid, [SceneObject(o.category, o.mask, o.center + 0.2)]),
                 QuerySet(np.zeros((0, 8)), None, []))
    with pytest.raises(ValidationError):
        validate_sample(bad, 0)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(0, 4), g=st.integers(2, 7))
def test_random_roundtrips_byte_identical(seed, n, g):
    cfg = SceneConfig(grid=g, min_objects=1, max_objects=2, min_size=1, max_size=2, n_categories=3,
                      d_appearance=4, d_emb=3, shape_family="mixed")
    data = generate_dataset(cfg, make_codebooks(cfg, seed), n, seed)
    buf = dumps(data)
    assert dumps(loads(buf)) == buf
