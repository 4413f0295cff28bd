"""scikit-learn style wrapper around training and inference."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import diffcore as dc
from . import metrics as M
from .config import RunConfig
from .model import forward_pass, make_batch
from .training import _EVAL_NOISE, _rng, evaluate, predict_masks, train
from .validation import check_dataset, check_is_fitted


class SlotSegmenter(TransformerMixin, BaseEstimator):
    """Query-conditioned slot model with a fit/transform/predict surface.

    ``X`` is always a list of :class:`ctrlo.synthscene.Sample`. ``config`` is
    a :class:`RunConfig` (defaults if None); the explicit keyword arguments
    override its fields when not None.

    >>> est = SlotSegmenter(steps=0)          # doctest: +SKIP
    >>> est.fit(train_samples).predict(test)  # (n, K) slot index per patch
    """

    def __init__(self, config=None, steps=None, seed=None, n_slots=None, batch_size=None, lr=None):
        self.config = config
        self.steps = steps
        self.seed = seed
        self.n_slots = n_slots
        self.batch_size = batch_size
        self.lr = lr

    def _resolved_config(self):
        cfg = self.config if self.config is not None else RunConfig()
        if not isinstance(cfg, RunConfig):
            raise TypeError("config must be a RunConfig or None")
        over = {k: getattr(self, k) for k in ("steps", "seed", "n_slots", "batch_size", "lr")
                if getattr(self, k) is not None}
        return cfg.replace(**over) if over else cfg

    def fit(self, X, y=None):
        cfg = self._resolved_config()
        X = check_dataset(X, cfg)
        self.params_, self.train_log_ = train(cfg, dataset=X)
        self.config_ = cfg
        self.n_patches_ = cfg.grid ** 2
        return self

    def _forward(self, X):
        cfg = self.config_
        rng = _rng(cfg.seed, _EVAL_NOISE)
        with dc.no_grad():
            out = forward_pass(make_batch(X, cfg.n_slots, None, cfg.use_queries), self.params_, cfg, rng=rng)
        return out

    def transform(self, X):
        """Slot vectors, (n, N, D_slot)."""
        check_is_fitted(self)
        X = check_dataset(X, self.config_, validate=False)
        return self._forward(X).slots.slots.data.copy()

    def predict_proba(self, X):
        """Soft decoder masks, (n, N, K)."""
        check_is_fitted(self)
        X = check_dataset(X, self.config_, validate=False)
        return predict_masks(self.params_, self.config_, X)[0]

    def predict(self, X):
        """Hard slot index per patch, (n, K)."""
        return np.argmax(self.predict_proba(X), axis=1)

    def evaluate(self, X):
        check_is_fitted(self)
        return evaluate(self.params_, self.config_, check_dataset(X, self.config_))

    def score(self, X, y=None):
        """Mean FG-ARI of the predicted partition."""
        check_is_fitted(self)
        X = check_dataset(X, self.config_)
        soft = predict_masks(self.params_, self.config_, X)[0]
        return float(np.mean([M.fg_ari(M.hard_masks(sm), s.scene.object_masks) for s, sm in zip(X, soft)]))
