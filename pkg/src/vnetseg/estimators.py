"""Scikit-learn style estimator and transformer facades.

``VNetSegmenter`` wraps the build/train/segment pipeline behind fit/predict
(with ``get_params``/``set_params`` inherited from ``BaseEstimator``), and
the intensity/geometry utilities are exposed as transformers so volumes can
flow through sklearn pipelines. X is a list of ``Volume`` objects or raw
(D, H, W) arrays; y is a matching list of ``LabelVolume`` or binary arrays.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .augment import (
    AugmentPolicy,
    densify,
    histogram_match,
    normalize_zscore,
    resample,
    sample_control_grid,
    warp,
)
from .inference import dice_metric, segment
from .network import NetworkConfig, build
from .training import TrainConfig, train
from .volume import LabelVolume, Volume


def _as_volume(x) -> Volume:
    if isinstance(x, Volume):
        return x
    return Volume(np.asarray(x))


def _as_label(y) -> LabelVolume:
    if isinstance(y, LabelVolume):
        return y
    return LabelVolume(np.asarray(y))


def _check_fitted(est, attr: str):
    if not hasattr(est, attr):
        raise RuntimeError(f"{type(est).__name__} is not fitted yet; call fit first")


class VNetSegmenter(BaseEstimator):
    """Volumetric segmenter trained with the Dice objective (or the
    re-weighted logistic baseline).

    Input dims are inferred from the training volumes at fit time; all
    volumes must share them. Defaults are the desk-scale regime.
    """

    def __init__(
        self,
        num_stages=3,
        base_channels=4,
        loss="dice",
        learning_rate=1e-4,
        momentum=0.99,
        lr_decay=0.1,
        lr_decay_interval=200,
        max_iterations=600,
        minibatch=2,
        augment=False,
        deform_sigma=15.0,
        hist_match=False,
        normalize=True,
        seed=0,
    ):
        self.num_stages = num_stages
        self.base_channels = base_channels
        self.loss = loss
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.lr_decay = lr_decay
        self.lr_decay_interval = lr_decay_interval
        self.max_iterations = max_iterations
        self.minibatch = minibatch
        self.augment = augment
        self.deform_sigma = deform_sigma
        self.hist_match = hist_match
        self.normalize = normalize
        self.seed = seed

    def fit(self, X, y):
        volumes = [_as_volume(x) for x in X]
        labels = [_as_label(t) for t in y]
        if len(volumes) != len(labels) or not volumes:
            raise ValueError("X and y must be non-empty lists of equal length")
        dims = volumes[0].dims
        for v in volumes + labels:
            if v.dims != dims:
                raise ValueError(f"all volumes must share dims {dims}, got {v.dims}")

        config = NetworkConfig(
            input_dims=dims,
            num_stages=self.num_stages,
            base_channels=self.base_channels,
        )
        cfg = TrainConfig(
            minibatch=self.minibatch,
            momentum=self.momentum,
            learning_rate=self.learning_rate,
            lr_decay=self.lr_decay,
            lr_decay_interval=self.lr_decay_interval,
            max_iterations=self.max_iterations,
            loss=self.loss,
            seed=self.seed,
            normalize=self.normalize,
        )
        if self.augment:
            policy = AugmentPolicy(
                deform=self.deform_sigma > 0,
                deform_sigma=self.deform_sigma,
                hist_match=self.hist_match,
                seed=self.seed,
            )
        else:
            policy = AugmentPolicy.disabled()

        self.model_ = build(config, seed=self.seed)
        run = train(list(zip(volumes, labels)), self.model_, cfg, policy=policy)
        self.history_ = run.history
        self.n_parameters_ = self.model_.parameter_count
        return self

    def predict(self, X):
        """Binary masks (foreground probability strictly above 0.5)."""
        _check_fitted(self, "model_")
        return [
            segment(self.model_, _as_volume(x), normalize=self.normalize).mask for x in X
        ]

    def predict_proba(self, X):
        """Foreground probability volumes."""
        _check_fitted(self, "model_")
        return [
            segment(self.model_, _as_volume(x), normalize=self.normalize).probabilities
            for x in X
        ]

    def score(self, X, y):
        """Mean Dice overlap against ground truth."""
        masks = self.predict(X)
        return float(np.mean([dice_metric(m, _as_label(t)) for m, t in zip(masks, y)]))


class ZScoreNormalizer(BaseEstimator, TransformerMixin):
    """Stateless per-volume zero-mean unit-variance normalization."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return [normalize_zscore(_as_volume(x)) for x in X]


class HistogramMatcher(BaseEstimator, TransformerMixin):
    """Match every volume's intensity CDF to a reference volume's.

    With ``reference=None`` the first volume seen at fit time is used.
    """

    def __init__(self, reference=None, bins=256):
        self.reference = reference
        self.bins = bins

    def fit(self, X, y=None):
        ref = self.reference if self.reference is not None else X[0]
        self.reference_ = _as_volume(ref)
        return self

    def transform(self, X):
        _check_fitted(self, "reference_")
        return [histogram_match(_as_volume(x), self.reference_, bins=self.bins) for x in X]


class Resampler(BaseEstimator, TransformerMixin):
    """Resample volumes to a common (x, y, z) mm spacing."""

    def __init__(self, target_spacing=(1.0, 1.0, 1.5)):
        self.target_spacing = target_spacing

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        sx, sy, sz = self.target_spacing
        return [resample(x if isinstance(x, (Volume, LabelVolume)) else _as_volume(x),
                         (sz, sy, sx)) for x in X]


class ElasticDeformer(BaseEstimator, TransformerMixin):
    """Random control-grid deformation, one fresh field per volume.

    Deterministic in (seed, volume index); mainly useful for offline
    augmentation or visual inspection of the training-time transform.
    """

    def __init__(self, sigma=15.0, grid_size=2, seed=0):
        self.sigma = sigma
        self.grid_size = grid_size
        self.seed = seed

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        out = []
        for i, x in enumerate(X):
            v = x if isinstance(x, (Volume, LabelVolume)) else _as_volume(x)
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, i]))
            grid = sample_control_grid(self.sigma, rng, self.grid_size)
            out.append(warp(v, densify(grid, v.dims)))
        return out
