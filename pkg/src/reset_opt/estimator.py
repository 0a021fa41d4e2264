"""scikit-learn style classifier around the resetting SGD loop."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y, validate_data

from . import nn
from . import training as tr
from .data import LabeledDataset, split_indices


class ResettingSGDClassifier(ClassifierMixin, BaseEstimator):
    """Fully connected (or custom) network trained by SGD with stochastic resetting.

    ``network`` may be a :class:`~reset_opt.nn.NetworkSpec` or its text form;
    when ``None`` an FCN with ``hidden`` units per layer is built. Without an
    explicit validation set a stratified ``validation_fraction`` of the
    training data is held out for checkpoint selection.

    Fitted attributes: ``classes_``, ``n_features_in_`` (size of the second
    axis, as scikit-learn counts it), ``net_``,
    ``params_`` (best parameters), ``metrics_``, ``best_iteration_``,
    ``n_resets_``.
    """

    def __init__(self, hidden=50, batch_norm=True, network=None, reset_probability=0.0,
                 patience=1000, validation_interval=20, sections=("former", "latter"),
                 perturbation_eps=0.0, learning_rate=1e-2, momentum=0.0, batch_size=16,
                 max_iter=10000, loss="ce", validation_fraction=1.0 / 3.0, random_state=0):
        self.hidden = hidden
        self.batch_norm = batch_norm
        self.network = network
        self.reset_probability = reset_probability
        self.patience = patience
        self.validation_interval = validation_interval
        self.sections = sections
        self.perturbation_eps = perturbation_eps
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.loss = loss
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _encode(self, y):
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if np.any(self.classes_[idx] != y):
            raise ValueError("y contains labels not seen in the training targets")
        return idx

    def _build_net(self, input_shape):
        if self.network is None:
            return nn.fcn(input_shape, self.hidden, len(self.classes_), self.batch_norm)
        net = self.network
        if isinstance(net, str):
            net = nn.NetworkSpec.from_text(net)
        if tuple(net.input_shape) != tuple(input_shape) or net.num_classes != len(self.classes_):
            raise ValueError(f"network expects input {net.input_shape} and {net.num_classes} "
                             f"classes; data has {tuple(input_shape)} and {len(self.classes_)}")
        return net

    def fit(self, X, y, X_val=None, y_val=None, y_true=None):
        """Train on ``(X, y)``; ``y`` may be noisy.

        ``y_true``, if known, enables the memorization-fraction column of
        ``metrics_``. ``X_val``/``y_val`` replace the internal split.
        """
        X, y = validate_data(self, X, y, allow_nd=True, dtype=np.float64)
        check_classification_targets(y)
        if self.loss not in nn.LOSSES:
            raise ValueError(f"loss must be one of {nn.LOSSES}")
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes; got 1 class")
        y_idx = self._encode(y)
        true_idx = y_idx if y_true is None else self._encode(check_array(
            y_true, ensure_2d=False, dtype=None))
        if len(true_idx) != len(y_idx):
            raise ValueError("y_true must have the same length as y")
        c = len(self.classes_)
        ds = LabeledDataset(X, true_idx, y_idx, c)
        if X_val is None:
            if y_val is not None:
                raise ValueError("y_val given without X_val")
            tr_idx, val_idx = split_indices(LabeledDataset(X, y_idx, y_idx, c),
                                            self.validation_fraction, self.random_state)
            train_ds, val_ds = ds.subset(tr_idx), LabeledDataset(X[val_idx], y_idx[val_idx],
                                                                 y_idx[val_idx], c)
        else:
            if y_val is None:
                raise ValueError("X_val given without y_val")
            X_val, y_val = check_X_y(X_val, y_val, allow_nd=True, dtype=np.float64)
            if X_val.shape[1:] != X.shape[1:]:
                raise ValueError("X_val has a different feature shape from X")
            yv = self._encode(y_val)
            train_ds, val_ds = ds, LabeledDataset(X_val, yv, yv, c)
        self.net_ = self._build_net(X.shape[1:])
        cfg = tr.ResetConfig(self.reset_probability, self.patience, self.validation_interval,
                             tuple(self.sections), self.perturbation_eps)
        opt = tr.OptimizerConfig(self.learning_rate, self.momentum, self.batch_size,
                                 self.max_iter, self.loss)
        result = tr.train(self.net_, train_ds, val_ds, None, cfg, opt, seed=self.random_state)
        if result.diverged:
            raise tr.NumericalError(result.error)
        self.params_ = result.best_params
        self.metrics_ = result.metrics
        self.best_iteration_ = result.best_iteration
        self.n_resets_ = result.n_resets
        self.n_iter_ = self.max_iter
        return self

    def _check_input(self, X):
        check_is_fitted(self, "params_")
        X = validate_data(self, X, reset=False, allow_nd=True, dtype=np.float64)
        if X.shape[1:] != tuple(self.net_.input_shape):
            raise ValueError(f"X has sample shape {X.shape[1:]}, expected {self.net_.input_shape}")
        return X

    def predict_proba(self, X):
        X = self._check_input(X)
        return nn.forward(self.net_, self.params_, X, mode="eval")

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]
