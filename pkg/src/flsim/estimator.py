"""scikit-learn compatible estimators trained with in-memory Federated Averaging.

The rows of ``X`` are partitioned into clients by ``groups`` (one client id per row).
Each round samples ``ceil(overselect * clients_per_round)`` clients, keeps the first
``clients_per_round`` updates in sampling order, and applies the weighted average.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .fedavg import (
    AggregateState,
    Hyperparams,
    LossKind,
    LossModel,
    ModelParams,
    absorb_update,
    client_update,
    finalize_round,
)


def _partition(groups: np.ndarray) -> list[np.ndarray]:
    _, inverse = np.unique(groups, return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    bounds = np.flatnonzero(np.diff(inverse[order])) + 1
    return np.split(order, bounds)


class _FedAvgBase(BaseEstimator):
    _loss_kind: LossKind

    def __init__(
        self,
        rounds=50,
        clients_per_round=10,
        overselect=1.3,
        epochs=1,
        batch_size=10,
        eta=0.1,
        fit_intercept=True,
        random_state=None,
    ):
        self.rounds = rounds
        self.clients_per_round = clients_per_round
        self.overselect = overselect
        self.epochs = epochs
        self.batch_size = batch_size
        self.eta = eta
        self.fit_intercept = fit_intercept
        self.random_state = random_state

    def _design(self, X):
        if self.fit_intercept:
            return np.hstack([X, np.ones((X.shape[0], 1))])
        return X

    def _fit(self, X, y, groups):
        if groups is None:
            groups = np.arange(X.shape[0])
        groups = np.asarray(groups).reshape(-1)
        if groups.shape[0] != X.shape[0]:
            raise ValueError("groups must have one entry per row of X")
        if self.rounds < 1 or self.clients_per_round < 1 or self.overselect < 1:
            raise ValueError("rounds, clients_per_round must be >= 1 and overselect >= 1")
        Z = self._design(X)
        clients = _partition(groups)
        rng = np.random.default_rng(self.random_state)
        loss = LossModel(self._loss_kind)
        w = ModelParams.zeros(Z.shape[1])
        self.history_ = []
        n_select = min(len(clients), math.ceil(round(self.clients_per_round * self.overselect, 9)))
        for t in range(self.rounds):
            chosen = rng.choice(len(clients), size=n_select, replace=False)[: self.clients_per_round]
            hyper = Hyperparams(self.epochs, self.batch_size, self.eta, seed=int(rng.integers(2**31)))
            state = AggregateState.empty(w.dim)
            for c in chosen:
                idx = clients[c]
                state = absorb_update(state, client_update(w, (Z[idx], y[idx]), hyper, loss))
            w = finalize_round(state, w)
            self.history_.append(loss.evaluate(w.weights, Z, y))
        self.params_ = w
        if self.fit_intercept:
            self.coef_ = w.weights[:-1].copy()
            self.intercept_ = float(w.weights[-1])
        else:
            self.coef_ = w.weights.copy()
            self.intercept_ = 0.0
        self.n_features_in_ = X.shape[1]
        self.n_clients_ = len(clients)
        return self

    def _decision(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X @ self.coef_ + self.intercept_


class FedAvgRegressor(RegressorMixin, _FedAvgBase):
    """Linear least-squares regression fitted with Federated Averaging."""

    _loss_kind = LossKind.LINEAR_REGRESSION_L2

    def fit(self, X, y, groups=None):
        X, y = check_X_y(X, y, y_numeric=True)
        return self._fit(X, y.astype(np.float64), groups)

    def predict(self, X):
        return self._decision(X)


class FedAvgClassifier(ClassifierMixin, _FedAvgBase):
    """Binary logistic regression fitted with Federated Averaging."""

    _loss_kind = LossKind.LOGISTIC_REGRESSION

    def fit(self, X, y, groups=None):
        X, y = check_X_y(X, y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) != 2:
            raise ValueError("FedAvgClassifier supports exactly two classes")
        return self._fit(X, y_enc.astype(np.float64), groups)

    def decision_function(self, X):
        return self._decision(X)

    def predict_proba(self, X):
        z = self._decision(X)
        p = 1.0 / (1.0 + np.exp(-z))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return self.classes_[(self._decision(X) > 0).astype(int)]
