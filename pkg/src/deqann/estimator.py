"""scikit-learn estimators wrapping the DEQ classifier and the structure imager."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import deq
from .fixedpoint import SolverConfig
from .graphimage import (COMPOUND_CUTOFF, MolecularStructure, image_to_tensor, parse_xyz,
                         structure_image)
from .validation import check_image_batch, check_labels


class DEQClassifier(ClassifierMixin, BaseEstimator):
    """Deep equilibrium image classifier.

    Inputs are ``(n, d, H, W)`` arrays.  The forward pass solves for the
    layer's fixed point with Anderson extrapolation (``accelerated=True``) or
    plain forward iteration; training is mini-batch SGD with implicit
    gradients.

    Parameters
    ----------
    k1 : int
        inner channel width of the implicit layer
    m, lam, beta, tol, max_iter :
        fixed-point solver settings (window, regularization, mixing,
        relative-residual tolerance, iteration cap)
    learning_rate, epochs, batch_size, cosine_annealing :
        SGD schedule
    backward_tol : float or None
        adjoint solve tolerance, ``tol / 100`` when None
    accelerated : bool
        Anderson (True) or forward iteration (False) for every solve
    random_state : int
        seeds initialization and shuffling

    Attributes
    ----------
    classes_ : ndarray
    model_ : deqann.deq.DeqModel
    history_ : list of deqann.deq.EpochRecord
    """

    def __init__(self, k1=8, m=5, lam=1e-5, beta=1.0, tol=1e-2, max_iter=1000,
                 learning_rate=0.5, epochs=20, batch_size=32, cosine_annealing=False,
                 backward_tol=None, accelerated=True, random_state=0, norm_eps=4.0,
                 lipschitz_cap=0.8):
        self.k1 = k1
        self.m = m
        self.lam = lam
        self.beta = beta
        self.tol = tol
        self.max_iter = max_iter
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.cosine_annealing = cosine_annealing
        self.backward_tol = backward_tol
        self.accelerated = accelerated
        self.random_state = random_state
        self.norm_eps = norm_eps
        self.lipschitz_cap = lipschitz_cap

    def _solver_config(self):
        return SolverConfig(m=self.m, lam=self.lam, beta=self.beta, tol=self.tol,
                            max_iter=self.max_iter)

    def train_config(self):
        return deq.TrainConfig(learning_rate=self.learning_rate, epochs=self.epochs,
                               batch_size=self.batch_size,
                               cosine_annealing=self.cosine_annealing,
                               seed=self.random_state, backward_tol=self.backward_tol)

    def fit(self, X, y, callback=None):
        X = check_image_batch(X)
        y = check_labels(y, len(X))
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes")
        self.model_ = deq.init_model(X.shape[1], self.k1, len(self.classes_),
                                     seed=self.random_state, solver=self._solver_config(),
                                     norm_eps=self.norm_eps, lipschitz_cap=self.lipschitz_cap)
        self.model_.mean = X.mean(axis=(0, 2, 3))
        self.model_.std = np.maximum(X.std(axis=(0, 2, 3)), 1e-8)
        batch = min(self.batch_size, len(X))
        cfg = self.train_config()
        if batch != cfg.batch_size:
            cfg = deq.TrainConfig(**{**cfg.__dict__, "batch_size": batch})
        _, self.history_ = deq.train(self.model_, (X, y_idx), cfg, self.accelerated, callback)
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_model(cls, model, classes=None, accelerated=True):
        """Wrap an already trained :class:`~deqann.deq.DeqModel`."""
        s = model.solver
        est = cls(k1=model.n_inner, m=s.m, lam=s.lam, beta=s.beta, tol=s.tol,
                  max_iter=s.max_iter, accelerated=accelerated, norm_eps=model.norm_eps,
                  lipschitz_cap=model.lipschitz_cap)
        est.model_ = model
        est.classes_ = np.arange(model.n_classes) if classes is None else np.asarray(classes)
        est.n_features_in_ = model.n_channels
        est.history_ = []
        return est

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_image_batch(X, self.model_.n_channels)
        return deq.predict_logits(self.model_, X, self.accelerated)

    def predict_proba(self, X):
        return deq.softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def evaluate(self, X, y):
        """Confusion matrix, accuracy and number of diverged samples."""
        check_is_fitted(self, "model_")
        X = check_image_batch(X, self.model_.n_channels)
        y_idx = np.searchsorted(self.classes_, check_labels(y, len(X)))
        return deq.evaluate(self.model_, (X, y_idx), self.accelerated)


class GraphImageTransformer(TransformerMixin, BaseEstimator):
    """Structures (or XYZ texts) to ``(n, 3, size, size)`` neighbor-graph images."""

    def __init__(self, cutoff=COMPOUND_CUTOFF, size=64):
        self.cutoff = cutoff
        self.size = size

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        out = []
        for item in X:
            s = item if isinstance(item, MolecularStructure) else parse_xyz(item)
            out.append(image_to_tensor(structure_image(s, self.cutoff, self.size, self.size)))
        return np.stack(out) if out else np.zeros((0, 3, self.size, self.size))
