"""scikit-learn style wrapper around the counting model."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .inference import InferenceConfig, predict_count
from .model import ModelConfig, load_model, save_checkpoint
from .mosaic import MosaicConfig
from .training import PretrainConfig, TrainConfig, finetune, pretrain
from .validation import check_samples, check_shots


class CountingRegressor(RegressorMixin, BaseEstimator):
    """Fit on annotated samples, predict object counts.

    ``X`` is a sequence of :class:`~countr.data.ImageSample`; targets come
    from each sample's dot annotations, so ``y`` is ignored by ``fit`` and
    defaults to the dot counts in ``score``.

    Parameters
    ----------
    model_config, train_config, pretrain_config, inference_config : dataclasses or None
        None means the defaults of each config class.
    mosaic_config : MosaicConfig or None
        Enables on-the-fly mosaic synthesis during fine-tuning.
    shots : int
        Exemplars used at prediction time (0 for exemplar-free counting).
    pretrain_steps : int
        Masked-autoencoder steps before fine-tuning; 0 skips pre-training.
    finetune_steps : int or None
        None derives the step count from ``train_config.epochs``.
    """

    def __init__(self, model_config=None, train_config=None, pretrain_config=None,
                 inference_config=None, mosaic_config=None, shots=3, pretrain_steps=0,
                 finetune_steps=None, random_state=0):
        self.model_config = model_config
        self.train_config = train_config
        self.pretrain_config = pretrain_config
        self.inference_config = inference_config
        self.mosaic_config = mosaic_config
        self.shots = shots
        self.pretrain_steps = pretrain_steps
        self.finetune_steps = finetune_steps
        self.random_state = random_state

    def _configs(self):
        return (self.model_config or ModelConfig(), self.train_config or TrainConfig(),
                self.pretrain_config or PretrainConfig(), self.inference_config or InferenceConfig())

    def fit(self, X, y=None):
        samples = check_samples(X)
        model_cfg, train_cfg, pre_cfg, _ = self._configs()
        seed = int(self.random_state or 0)
        encoder = None
        self.pretrain_log_ = []
        if self.pretrain_steps:
            mae = pretrain(samples, model_cfg, pre_cfg, steps=self.pretrain_steps, seed=seed,
                           log=self.pretrain_log_.append)
            encoder = mae.encoder.state_dict()
        self.train_log_ = []
        self.model_ = finetune(samples, model_cfg, train_cfg, steps=self.finetune_steps,
                               seed=seed, init_encoder=encoder, mosaic_cfg=self.mosaic_config,
                               log=self.train_log_.append)
        return self

    def predict_details(self, X):
        check_is_fitted(self, "model_")
        samples = check_samples(X)
        shots = check_shots(self.shots, samples)
        cfg = self._configs()[3]
        return [predict_count(self.model_, s, shots, cfg) for s in samples]

    def predict(self, X) -> np.ndarray:
        return np.array([p.count for p in self.predict_details(X)])

    def predict_density(self, X):
        return [p.density for p in self.predict_details(X)]

    def score(self, X, y=None, sample_weight=None):
        """R^2 of predicted against true counts (dot counts when ``y`` is None)."""
        samples = check_samples(X)
        if y is None:
            y = [s.count for s in samples]
        return super().score(samples, y, sample_weight=sample_weight)

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, self.model_.config, kind="countr")

    @classmethod
    def from_checkpoint(cls, path, **params) -> "CountingRegressor":
        model, _ = load_model(path)
        est = cls(model_config=model.config, **params)
        est.model_ = model
        return est
