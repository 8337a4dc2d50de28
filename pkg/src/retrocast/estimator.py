"""Scikit-learn-style estimator facade over the training harness.

`SceneForecaster` treats scene seeds as samples: ``fit`` trains on a list of
generator seeds, ``predict`` returns one prediction record per seed, and
``score`` reports EPA on a held-out seed list. Hyperparameters are the
flattened experiment-config fields, so `get_params` / `set_params` /
`clone` work as usual.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import harness
from .config import ExperimentConfig, config_from_dict, with_overrides
from .metrics import evaluate_frames
from .synthscene import generate_scene


def _check_seeds(seeds) -> list[int]:
    arr = np.asarray(seeds)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"expected a non-empty 1-D seed list, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.allclose(arr, np.round(arr)):
            raise ValueError("seeds must be integers")
        arr = arr.astype(int)
    return [int(s) for s in arr]


class SceneForecaster(BaseEstimator):
    """Joint detector-forecaster trained on procedurally generated scenes.

    Parameters mirror the experiment config; anything not exposed here can
    be set through the `overrides` dict using dotted paths, e.g.
    ``{"model.n_heads": 2}``.
    """

    def __init__(self, steps: int = 500, learning_rate: float = 2e-3,
                 n_queries: int = 16, embed_dim: int = 32,
                 past_motion_mode: str = "appearance_guided",
                 seed: int = 0, overrides: dict | None = None):
        self.steps = steps
        self.learning_rate = learning_rate
        self.n_queries = n_queries
        self.embed_dim = embed_dim
        self.past_motion_mode = past_motion_mode
        self.seed = seed
        self.overrides = overrides

    def _config(self, n_scenes: int, seed_start: int) -> ExperimentConfig:
        cfg = config_from_dict({
            "model": {"n_queries": self.n_queries, "embed_dim": self.embed_dim,
                      "past_motion_mode": self.past_motion_mode},
            "optim": {"steps": self.steps, "learning_rate": self.learning_rate,
                      "checkpoint_interval": 0},
            "seed": self.seed,
        })
        cfg = dataclasses.replace(cfg, n_train_scenes=n_scenes,
                                  train_seed_start=seed_start)
        if self.overrides:
            cfg = with_overrides(cfg, dict(self.overrides))
        return cfg

    def fit(self, X, y=None):
        """Train on the scenes generated from seed list `X` (y is ignored)."""
        seeds = _check_seeds(X)
        if seeds != list(range(seeds[0], seeds[0] + len(seeds))):
            raise ValueError("fit expects a contiguous seed range")
        self.config_ = self._config(len(seeds), seeds[0])
        self.model_, self.report_ = harness.train(self.config_)
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "This SceneForecaster instance is not fitted yet; call fit first.")

    def predict(self, X):
        """Prediction records (detections with pasts and futures), one per seed."""
        self._require_fitted()
        return [harness.predict_scene(self.model_,
                                      generate_scene(self.config_.scene, s))
                for s in _check_seeds(X)]

    def score(self, X, y=None) -> float:
        """EPA over the scenes generated from seed list `X`."""
        self._require_fitted()
        frames = []
        for s in _check_seeds(X):
            scene = generate_scene(self.config_.scene, s)
            frames.append(harness.record_to_frame(
                harness.predict_scene(self.model_, scene), scene))
        return evaluate_frames(frames, alpha=self.config_.loss.epa_alpha).epa
