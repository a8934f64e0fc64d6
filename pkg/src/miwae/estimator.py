"""scikit-learn compatible front end: ``MIWAEImputer().fit(X).transform(X)``.

Missing entries are NaN in the input arrays.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._random import substream
from .bounds import TrainConfig, loglik_rows, train
from .data import Standardizer
from .imputation import impute_rows, multiple_impute_rows
from .model import DlvmModel


def _check_X(X, n_features=None):
    X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan")
    mask = np.isnan(X)
    if mask.all(axis=1).any():
        raise ValueError("rows with no observed entry cannot be encoded")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"X has {X.shape[1]} features, expected {n_features}")
    return X, mask


class MIWAEImputer(TransformerMixin, BaseEstimator):
    """Deep latent variable model fitted on incomplete data, used as an imputer.

    Fitting maximises the K-sample importance-weighted bound on the likelihood
    of the observed entries. ``transform`` fills each missing entry with its
    self-normalised importance sampling estimate of ``E[x_miss | x_obs]``;
    ``sample_imputations`` draws completed data sets by importance resampling.

    Parameters
    ----------
    latent_dim : int, default=10
    hidden : tuple of int, default=(128, 128, 128)
        Hidden widths of both the encoder and the decoder (tanh units).
    obs_family : {'studentt', 'gaussian', 'bernoulli'}, default='studentt'
    var_family : {'studentt', 'gaussian'}, default='studentt'
    obs_variance_floor : float, default=0.01
    K : int, default=20
        Importance samples per row in the training bound (1 gives MVAE).
    n_steps : int, default=50_000
    batch_size : int, default=64
    learning_rate : float, default=1e-3
    estimator : {'standard', 'pathwise'}, default='standard'
    n_importance : int, default=10_000
        Particles per row used by ``transform``.
    standardize : bool, default=True
        Scale columns to zero mean and unit variance (observed entries) first.
    random_state : int, default=0
    """

    def __init__(self, latent_dim=10, hidden=(128, 128, 128), obs_family="studentt",
                 var_family="studentt", obs_variance_floor=0.01, K=20, n_steps=50_000,
                 batch_size=64, learning_rate=1e-3, estimator="standard",
                 n_importance=10_000, standardize=True, random_state=0):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.obs_family = obs_family
        self.var_family = var_family
        self.obs_variance_floor = obs_variance_floor
        self.K = K
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.estimator = estimator
        self.n_importance = n_importance
        self.standardize = standardize
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(K=self.K, batch_size=self.batch_size, steps=self.n_steps,
                           learning_rate=self.learning_rate, seed=self.random_state,
                           estimator=self.estimator)

    def _scale(self, X):
        return self.standardizer_.transform(X) if self.standardizer_ is not None else X

    def _unscale(self, X):
        return self.standardizer_.inverse_transform(X) if self.standardizer_ is not None else X

    def fit(self, X, y=None):
        X, mask = _check_X(X)
        self.n_features_in_ = X.shape[1]
        self.standardizer_ = Standardizer().fit(X, mask) if self.standardize else None
        self.model_ = DlvmModel(
            self.n_features_in_, self.latent_dim, self.hidden, self.obs_family,
            self.var_family, self.obs_variance_floor,
            seed=substream(self.random_state, "init"))
        self.history_ = train(self.model_, self._scale(X), mask, self._train_config())
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X, mask = _check_X(X, self.n_features_in_)
        filled, self.ess_ = impute_rows(self.model_, self._scale(X), mask,
                                        self.n_importance, self.random_state)
        return np.where(mask, self._unscale(filled), X)

    def sample_imputations(self, X, n_imputations=20, n_importance=None, min_ratio=50):
        """``n_imputations`` completed copies of ``X`` drawn by importance resampling."""
        check_is_fitted(self, "model_")
        X, mask = _check_X(X, self.n_features_in_)
        L = self.n_importance if n_importance is None else n_importance
        sets, self.ess_ = multiple_impute_rows(self.model_, self._scale(X), mask, L,
                                               n_imputations, self.random_state, min_ratio)
        return [np.where(mask, self._unscale(s), X) for s in sets]

    def score_samples(self, X, n_importance=5000):
        """Per-row estimates of ``log p(x_obs)`` in the units of ``X``."""
        check_is_fitted(self, "model_")
        X, mask = _check_X(X, self.n_features_in_)
        ll = loglik_rows(self.model_, self._scale(X), mask, n_importance, self.random_state)
        if self.standardizer_ is not None:
            # change of variables for the observed coordinates
            ll = ll - (~mask) @ np.log(self.standardizer_.scale_)
        return ll

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))
