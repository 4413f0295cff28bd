import numpy as np
import pytest

from ctrlo.config import RunConfig
from ctrlo.synthscene import SceneConfig, generate_dataset, make_codebooks


def tiny_config(**kw):
    """N=3 slots, 8 patches of width 4; every hidden width 4-8 so finite
    differences over all parameters stay fast."""
    base = dict(grid=2, d_appearance=2, d_emb=2, n_slots=3, n_iters=2, d_slot=4, d_attn=4,
                slot_mlp_hidden=4, map_blocks=1, map_heads=2, map_ff_mult=1, dec_hidden=4,
                dec_layers=1, head_hidden=4, n_categories=3, min_objects=1, max_objects=2)
    base.update(kw)
    return RunConfig(**base)


def small_config(**kw):
    base = dict(grid=4, n_slots=4, max_objects=3, d_appearance=8, d_emb=8, d_slot=8, d_attn=8,
                slot_mlp_hidden=16, map_blocks=1, map_heads=2, map_ff_mult=2, dec_hidden=16,
                head_hidden=16, batch_size=4, steps=3, eval_samples=6, n_categories=4)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_world():
    cfg = SceneConfig(grid=6, n_categories=4, d_appearance=8, d_emb=8, min_objects=1, max_objects=3)
    return cfg, make_codebooks(cfg, seed=5)


@pytest.fixture(scope="session")
def small_dataset(small_world):
    cfg, books = small_world
    return generate_dataset(cfg, books, 12, seed=9)
