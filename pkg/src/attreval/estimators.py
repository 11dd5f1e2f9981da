"""scikit-learn style wrappers around training and grid evaluation."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .attribution.methods import MethodConfig
from .explain import attribute, parse_method
from .grids import build_grids, localization_score, prepare, run_campaign
from .nn.model import merge_batchnorm
from .nn.presets import build_preset
from .nn.training import predict_logits, softmax, train_sgd
from .validation import check_images, check_int, check_labels


class CNNClassifier(ClassifierMixin, BaseEstimator):
    """A preset CNN trained with minibatch SGD.

    Parameters mirror :func:`attreval.nn.train_sgd`; ``arch`` names a preset.
    After ``fit``, ``model_`` holds the trained network.
    """

    def __init__(self, arch="tinyvgg-plain", num_classes=10, epochs=10, lr=0.003,
                 batch_size=16, momentum=0.9, weight_decay=0.0, flip=True, seed=0):
        self.arch = arch
        self.num_classes = num_classes
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.flip = flip
        self.seed = seed

    def fit(self, X, y):
        X = check_images(X, channels=3)
        y = check_labels(y, len(X), self.num_classes)
        check_int(self.epochs, "epochs", 0)
        check_int(self.batch_size, "batch_size", 1)
        init = build_preset(self.arch, self.num_classes, self.seed, X.shape[2])
        self.model_, self.train_accuracy_ = train_sgd(
            init, X, y, epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
            seed=self.seed, momentum=self.momentum, weight_decay=self.weight_decay,
            flip=self.flip)
        self.classes_ = np.arange(self.num_classes)
        return self

    @classmethod
    def from_model(cls, model, **params):
        est = cls(num_classes=model.num_classes, **params)
        est.model_ = model
        est.classes_ = np.arange(model.num_classes)
        est.train_accuracy_ = None
        return est

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return predict_logits(self.model_, check_images(X))

    def predict_proba(self, X):
        return softmax(self.decision_function(X).astype(np.float64))

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]


class GridAttributor(BaseEstimator):
    """Explain grid composites with one method at one tap under one setting.

    ``fit(model)`` stores the (BatchNorm-merged) model. ``explain`` returns
    one attribution map and ``transform`` a localization score per
    ``(grid, target cell)`` pair.
    """

    def __init__(self, method="ixg", tap="input", setting="gridpg", n=2, seed=0,
                 method_config=None):
        self.method = method
        self.tap = tap
        self.setting = setting
        self.n = n
        self.seed = seed
        self.method_config = method_config

    def _config(self):
        cfg = self.method_config
        if cfg is None:
            return MethodConfig()
        return cfg if isinstance(cfg, MethodConfig) else MethodConfig.from_dict(cfg)

    def fit(self, model, y=None):
        parse_method(self.method)
        check_int(self.n, "n", 1)
        self.model_ = merge_batchnorm(model)
        self.model_.tap_index(self.tap)
        self.config_ = self._config()
        return self

    def explain(self, grid, target_cell):
        check_is_fitted(self, "model_")
        task = prepare(self.model_, grid.composite, grid.n, self.setting, self.tap)
        target = task.target_index(target_cell, grid.cells[target_cell].label)
        amap = attribute(self.method, task.explain, task.tap_input, target, self.config_,
                         at_input=task.tap_index == 0, seed=self.seed, tap=str(self.tap))
        amap.upsampled = task.upsample(amap.values)
        amap.sample_id = grid.id
        amap.positive_mass_target = localization_score(amap, grid, target_cell).numerator
        return amap

    def evaluate(self, grids, workers=1):
        """Localization records for every target of every grid."""
        check_is_fitted(self, "model_")
        return run_campaign(self.model_, [self.method], [self.tap], [self.setting],
                            list(grids), self.config_, self.seed, workers).records

    def transform(self, grids):
        return np.array([r.score for r in self.evaluate(grids)])

    def make_grids(self, pool, count, seed=None):
        return build_grids(pool, self.n, count, self.setting, self.seed if seed is None else seed)


__all__ = ["CNNClassifier", "GridAttributor"]
