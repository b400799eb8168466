"""scikit-learn style wrapper around model building, training and evaluation."""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted, validate_data

from .adversary import PerturbationSpec, msd, pgd
from .data_io import Dataset
from .evaluation import default_suite, evaluate
from .models import ModelSpec, predict_logits
from .training import TrainConfig, train


def _as_images(X: np.ndarray, image_shape: Optional[Tuple[int, int, int]]) -> np.ndarray:
    if image_shape is None:
        return X.reshape(len(X), 1, 1, X.shape[1])
    return X.reshape((len(X),) + tuple(image_shape))


class RobustClassifier(ClassifierMixin, BaseEstimator):
    """Adversarially trained classifier on flattened inputs in [0, 1].

    ``X`` has one row per example.  With ``image_shape=None`` an MLP with
    hidden ``widths`` is used; with ``arch="mnist_cnn"`` rows are reshaped to
    ``image_shape``.  ``specs`` are the perturbation models used by every
    non-clean strategy.
    """

    def __init__(self, strategy: str = "msd", specs: Sequence[PerturbationSpec] = (), arch: str = "mlp",
                 widths: Tuple[int, ...] = (32, 32), image_shape: Optional[Tuple[int, int, int]] = None,
                 scaled: bool = True, epochs: int = 15, batch_size: int = 50, optimizer: str = "adam",
                 schedule=((0.0, 0.0), (6.0, 1e-3), (15.0, 0.0)), msd_iterations: Optional[int] = None,
                 random_state: int = 0, threads: int = 1):
        self.strategy = strategy
        self.specs = specs
        self.arch = arch
        self.widths = widths
        self.image_shape = image_shape
        self.scaled = scaled
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.schedule = schedule
        self.msd_iterations = msd_iterations
        self.random_state = random_state
        self.threads = threads

    def _validate(self, X, y=None, reset=False):
        if y is None:
            X = validate_data(self, X, reset=reset, dtype=np.float64)
        else:
            X, y = validate_data(self, X, y, reset=reset, dtype=np.float64)
        if X.size and (X.min() < 0 or X.max() > 1):
            raise ValueError("inputs must lie in [0, 1]")
        return X, y

    def fit(self, X, y):
        X, y = self._validate(X, y, reset=True)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        codes = np.searchsorted(self.classes_, y)
        images = _as_images(X, self.image_shape)
        if self.arch == "mnist_cnn":
            self.model_ = ModelSpec.mnist(scaled=self.scaled)
        else:
            self.model_ = ModelSpec.mlp(X.shape[1], len(self.classes_), tuple(self.widths))
        config = TrainConfig(strategy=self.strategy, specs=tuple(self.specs) if self.strategy != "clean" else (),
                             msd_iterations=self.msd_iterations, optimizer=self.optimizer,
                             schedule=tuple(self.schedule), epochs=self.epochs, batch_size=self.batch_size,
                             seed=self.random_state, threads=self.threads)
        self.params_, self.log_ = train(config, self.model_, Dataset(images, codes))
        return self

    def _logits(self, X):
        check_is_fitted(self, "params_")
        X, _ = self._validate(X)
        return predict_logits(self.model_, self.params_, _as_images(X, self.image_shape))

    def decision_function(self, X):
        return self._logits(X)

    def predict_proba(self, X):
        z = self._logits(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        codes = self._logits(X).argmax(axis=1)
        return self.classes_[codes]

    def _encoded(self, X, y):
        check_is_fitted(self, "params_")
        X, y = self._validate(X, y)
        if not np.isin(y, self.classes_).all():
            raise ValueError("y contains labels unseen during fit")
        return _as_images(X, self.image_shape), np.searchsorted(self.classes_, y)

    def perturb(self, X, y, specs: Optional[Sequence[PerturbationSpec]] = None, iterations: Optional[int] = None,
                random_state: int = 0):
        """Adversarial rows: PGD for one spec, MSD for several."""
        images, codes = self._encoded(X, y)
        specs = tuple(specs if specs is not None else self.specs)
        if not specs:
            raise ValueError("no perturbation specs given")
        if len(specs) == 1:
            out = pgd(self.model_, self.params_, images, codes, specs[0], random_state)
        else:
            T = iterations or max(s.iterations for s in specs)
            out = msd(self.model_, self.params_, images, codes, specs, T, random_state)
        return (images + out.delta).reshape(len(images), -1)

    def robust_score(self, X, y, specs: Optional[Sequence[PerturbationSpec]] = None, trials: int = 5,
                     random_state: int = 0) -> float:
        """Union robust accuracy over the default attack suite built from ``specs``."""
        images, codes = self._encoded(X, y)
        specs = tuple(specs if specs is not None else self.specs)
        suite = default_suite({s.norm: s for s in specs}, trials=trials)
        report = evaluate(self.model_, self.params_, Dataset(images, codes), suite, seed=random_state)
        self.last_report_ = report
        return report.union_accuracy
