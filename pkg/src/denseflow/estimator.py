"""Scikit-learn style density estimator facade.

``DenseFlowDensityEstimator`` follows the fit / score_samples / sample
protocol of sklearn density estimators (for example ``KernelDensity``) and
implements ``get_params`` / ``set_params``, so it composes with pipelines,
``clone`` and model-selection utilities without importing scikit-learn.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from ._validation import check_images, check_random_state
from .config import TrainConfig
from .errors import ConfigError, NotFittedError
from .evaluation import LN2, evaluate
from .model import PRESETS, FlowModel
from .training import train


class DenseFlowDensityEstimator:
    """Exact-likelihood-bound generative model over discrete images.

    Parameters mirror the config surface: ``preset`` picks the flow
    topology, the remaining arguments control optimization. ``fit``
    expects a uint8 array shaped (n, channels, height, width).
    """

    def __init__(self, preset="desk-12-4", growth_rate=None, steps=200,
                 epochs=10, batch_size=32, learning_rate=1e-3,
                 warmup_steps=100, decay_factor=0.98, grad_clip_norm=100.0,
                 hflip=True, mc_samples=1, temperature=0.8, random_state=None):
        self.preset = preset
        self.growth_rate = growth_rate
        self.steps = steps
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.warmup_steps = warmup_steps
        self.decay_factor = decay_factor
        self.grad_clip_norm = grad_clip_norm
        self.hflip = hflip
        self.mc_samples = mc_samples
        self.temperature = temperature
        self.random_state = random_state

    _param_names = (
        "preset", "growth_rate", "steps", "epochs", "batch_size",
        "learning_rate", "warmup_steps", "decay_factor", "grad_clip_norm",
        "hflip", "mc_samples", "temperature", "random_state",
    )

    # -- sklearn protocol --------------------------------------------------

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._param_names}

    def set_params(self, **params):
        for key, value in params.items():
            if key not in self._param_names:
                raise ConfigError(
                    f"invalid parameter {key!r} for DenseFlowDensityEstimator"
                )
            setattr(self, key, value)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this DenseFlowDensityEstimator instance is not fitted yet; "
                "call fit before using this method"
            )

    # -- estimator surface ---------------------------------------------------

    def fit(self, X, y=None):
        X = check_images(X)
        seed = 0 if self.random_state is None else int(self.random_state)
        if self.preset not in PRESETS:
            raise ConfigError(
                f"unknown preset {self.preset!r}; available: {sorted(PRESETS)}"
            )
        flow_config = PRESETS[self.preset]()
        overrides = {"image_shape": tuple(X.shape[1:]), "seed": seed}
        if self.growth_rate is not None:
            overrides["growth_rate"] = self.growth_rate
        flow_config = replace(flow_config, **overrides)
        self.flow_config_ = flow_config.validate()
        self.train_config_ = TrainConfig(
            lr=self.learning_rate, batch_size=self.batch_size,
            epochs=self.epochs, max_steps=self.steps,
            warmup_steps=self.warmup_steps, decay_factor=self.decay_factor,
            grad_clip_norm=self.grad_clip_norm, hflip=self.hflip, seed=seed,
        ).validate()
        model = FlowModel(self.flow_config_)
        result = train(model, X, self.train_config_)
        self.model_ = result.model.eval()
        self.metrics_ = result.metrics
        self.checkpoint_ = result.checkpoint
        self.image_shape_ = tuple(X.shape[1:])
        return self

    def score_samples(self, X):
        """Per-example log-likelihood bound in nats (natural log)."""
        self._check_fitted()
        X = check_images(X, *self.image_shape_)
        seed = 0 if self.random_state is None else int(self.random_state)
        report = evaluate(self.model_, X, mc_samples=self.mc_samples, seed=seed,
                          batch_size=self.batch_size)
        dims = int(np.prod(self.image_shape_))
        return -report.bpd_per_example * dims * LN2

    def score(self, X, y=None):
        """Mean log-likelihood bound over X, in nats per example."""
        return float(self.score_samples(X).mean())

    def bits_per_dim(self, X):
        self._check_fitted()
        X = check_images(X, *self.image_shape_)
        dims = int(np.prod(self.image_shape_))
        return -self.score_samples(X) / (dims * LN2)

    def sample(self, n_samples=1, random_state=None):
        """Draw images in one inverse pass; returns uint8 (n, c, h, w)."""
        self._check_fitted()
        rng = check_random_state(
            self.random_state if random_state is None else random_state
        )
        return self.model_.sample(n_samples, temperature=self.temperature, rng=rng)
