"""scikit-learn style wrappers: a stream transformer and the classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from .datapipe import (
    DEFAULT_FAST_STRIDE,
    DEFAULT_SLOW_STRIDE,
    STREAMS,
    check_skeleton_tree,
    decouple_spatial,
    decouple_temporal,
    pad_edge,
)
from .network import DSTANet, LayerSpec, NetworkConfig
from .tensorkit import DEFAULT_LEAKY_SLOPE
from .trainer import TrainConfig, fit_arrays


def _check_sequences(X, name: str = "X") -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True,
                    input_name=name)
    if X.ndim != 4:
        raise ValueError(f"{name}: expected a 4-d array, got {X.ndim} dimension(s)")
    return X


class StreamDecoupler(TransformerMixin, BaseEstimator):
    """Map raw ``(B, T, N, C)`` frames to one ``(B, N, T, C)`` stream.

    ``bones`` is needed for the spatial stream ``"s"`` only.
    """

    def __init__(self, stream="st", bones=None, fast_stride=DEFAULT_FAST_STRIDE,
                 slow_stride=DEFAULT_SLOW_STRIDE):
        self.stream = stream
        self.bones = bones
        self.fast_stride = fast_stride
        self.slow_stride = slow_stride

    def fit(self, X, y=None):
        X = _check_sequences(X)
        if self.stream not in STREAMS:
            raise ValueError(f"stream: expected one of {list(STREAMS)}, got {self.stream!r}")
        if self.stream == "s":
            if self.bones is None:
                raise ValueError("bones: required for the spatial stream")
            check_skeleton_tree([tuple(b) for b in self.bones], X.shape[2])
        for name in ("fast_stride", "slow_stride"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name}: must be a positive integer")
        self.n_joints_ = X.shape[2]
        self.n_channels_ = X.shape[3]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_joints_")
        X = _check_sequences(X)
        if X.shape[2:] != (self.n_joints_, self.n_channels_):
            raise ValueError(f"X: expected (B, T, {self.n_joints_}, {self.n_channels_}), "
                             f"got {X.shape}")
        return np.stack([self._one(frames) for frames in X]) if len(X) else \
            np.zeros((0, X.shape[2], X.shape[1], X.shape[3]))

    def _one(self, frames: np.ndarray) -> np.ndarray:
        t = frames.shape[0]
        if self.stream == "st":
            return frames.transpose(1, 0, 2).copy()
        if self.stream == "s":
            return decouple_spatial(frames, [tuple(b) for b in self.bones])
        stride = self.fast_stride if self.stream == "ft" else self.slow_stride
        return pad_edge(decouple_temporal(frames, int(stride)), t)


class DSTANetClassifier(ClassifierMixin, BaseEstimator):
    """Attention network trained with Nesterov SGD on ``(B, N, T, C)`` arrays.

    ``channels`` lists the output width of every layer; each layer gets
    ``heads`` heads.  Labels may be any hashable values; they are mapped to
    class indices in sorted order.
    """

    def __init__(self, channels=(16, 32), heads=2, strategy="c", use_sgr=True, alpha=1.0,
                 score_norm="tanh", leaky_slope=DEFAULT_LEAKY_SLOPE, epochs=200,
                 batch_size=32, lr=0.01, lr_drop_epochs=None, lr_drop_factor=10.0,
                 momentum=0.9, weight_decay=0.0005, seed=0):
        self.channels = channels
        self.heads = heads
        self.strategy = strategy
        self.use_sgr = use_sgr
        self.alpha = alpha
        self.score_norm = score_norm
        self.leaky_slope = leaky_slope
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_drop_epochs = lr_drop_epochs
        self.lr_drop_factor = lr_drop_factor
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.seed = seed

    def _network_config(self, shape, num_classes: int) -> NetworkConfig:
        _, n, t, c = shape
        layers = [LayerSpec(c_out=int(w), heads=int(self.heads), strategy=self.strategy,
                            use_sgr=bool(self.use_sgr), alpha=float(self.alpha))
                  for w in self.channels]
        return NetworkConfig(n, t, c, num_classes, layers, score_norm=self.score_norm,
                             leaky_slope=float(self.leaky_slope)).validate()

    def _train_config(self) -> TrainConfig:
        drops = self.lr_drop_epochs
        if drops is None:
            # the default schedule's drops at 1/2 and 3/4 of the run
            drops = sorted({e for e in (self.epochs // 2, (3 * self.epochs) // 4)
                            if 1 <= e < self.epochs})
        return TrainConfig(epochs=int(self.epochs), batch_size=int(self.batch_size),
                           base_lr=float(self.lr), lr_drop_epochs=tuple(drops),
                           lr_drop_factor=float(self.lr_drop_factor),
                           momentum=float(self.momentum),
                           weight_decay=float(self.weight_decay), seed=int(self.seed)).validate()

    def fit(self, X, y):
        X = _check_sequences(X)
        y = column_or_1d(y, warn=True)
        if len(y) != len(X):
            raise ValueError(f"y: {len(y)} labels for {len(X)} samples")
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        config = self._network_config(X.shape, len(self.classes_))
        self.network_ = DSTANet(config, int(self.seed))
        self.history_ = fit_arrays(self.network_, X, encoded, self._train_config())
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        X = _check_sequences(X)
        cfg = self.network_.config
        expected = (cfg.num_joints, cfg.num_frames, cfg.in_channels)
        if X.shape[1:] != expected:
            raise ValueError(f"X: expected (B, {', '.join(map(str, expected))}), got {X.shape}")
        return self.network_.predict_proba(X)

    def predict(self, X):
        check_is_fitted(self, "network_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
