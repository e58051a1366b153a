"""scikit-learn style wrapper around the training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from .evaluation import ade, predict_world
from .models import ModelSpec
from .social import SocialConfig
from .train import Checkpoint, TrainConfig, train_run
from .validation import as_sample_arrays


class TrajectoryForecaster(RegressorMixin, BaseEstimator):
    """Predict 12 future positions from 8 observed ones.

    ``X`` is (n, 8, 2) in scene coordinates (meters), a list of
    :class:`~trajconv.data.Sample`, or a :class:`~trajconv.data.SampleArrays`.
    Social encoders need neighbour positions, passed to :meth:`fit` and
    :meth:`predict` as ``neighbors`` of shape (n, 8, K, 2) with NaN padding.
    """

    def __init__(self, family="conv2d", kernel_size=5, norm_mode="tobs", augment=(), noise_sigma=0.05,
                 social="none", preset="eth_ucy", epochs=None, base_lr=None, batch_size=64, seed=0):
        self.family = family
        self.kernel_size = kernel_size
        self.norm_mode = norm_mode
        self.augment = augment
        self.noise_sigma = noise_sigma
        self.social = social
        self.preset = preset
        self.epochs = epochs
        self.base_lr = base_lr
        self.batch_size = batch_size
        self.seed = seed

    def _config(self) -> TrainConfig:
        spec = ModelSpec(family=self.family, kernel_size=self.kernel_size, social=SocialConfig(self.social))
        spec.validate()
        return TrainConfig.from_preset(self.preset, epochs=self.epochs, base_lr=self.base_lr,
                                       batch_size=self.batch_size, norm_mode=self.norm_mode,
                                       augment=tuple(self.augment or ()), noise_sigma=self.noise_sigma,
                                       model=spec, seed=self.seed)

    def fit(self, X, y=None, neighbors=None):
        samples = as_sample_arrays(X, y, neighbors)
        if not samples.labeled:
            raise ValueError("fit needs ground-truth futures for every sample")
        self.checkpoint_, self.loss_log_ = train_run(self._config(), samples)
        self.n_params_ = self.checkpoint_.params.trainable_count()
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "TrajectoryForecaster":
        c = ckpt.config
        est = cls(family=c.model.family, kernel_size=c.model.kernel_size, norm_mode=c.norm_mode,
                  augment=c.augment, noise_sigma=c.noise_sigma, social=c.model.social.kind, preset=c.preset,
                  epochs=c.epochs, base_lr=c.base_lr, batch_size=c.batch_size, seed=c.seed)
        est.checkpoint_, est.loss_log_ = ckpt, []
        est.n_params_ = ckpt.params.trainable_count()
        return est

    def predict(self, X, neighbors=None) -> np.ndarray:
        if not hasattr(self, "checkpoint_"):
            raise NotFittedError("TrajectoryForecaster is not fitted yet")
        return predict_world(self.checkpoint_, as_sample_arrays(X, None, neighbors))

    def score(self, X, y, sample_weight=None, neighbors=None) -> float:
        """Negative ADE, so that larger is better."""
        samples = as_sample_arrays(X, y, neighbors)
        return -ade(self.predict(samples), samples.future)
