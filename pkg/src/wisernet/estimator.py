"""scikit-learn style wrapper around the segmentation network."""

from __future__ import annotations

from dataclasses import fields
from typing import Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from wisernet.config import TrainConfig
from wisernet.exceptions import UsageError
from wisernet.metrics import SPACES, embed
from wisernet.segnet import WaveSegNet, load_model, save_model
from wisernet.training import fit as fit_model
from wisernet.training import mean_dsc, predict_proba


def check_images(X, multiple: int = 1, channels: int = 3) -> np.ndarray:
    """Validate an image batch: ``(N, C, H, W)``, finite, in [0, 1]."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise UsageError(f"expected images shaped (N, C, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise UsageError("no images given")
    if X.shape[1] != channels:
        raise UsageError(f"expected {channels} channels, got {X.shape[1]}")
    if X.shape[2] % multiple or X.shape[3] % multiple:
        raise UsageError(f"image size {X.shape[2]}x{X.shape[3]} must be divisible by {multiple}")
    X = X.astype(np.float32, copy=False)
    if not np.all(np.isfinite(X)):
        raise UsageError("images contain non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise UsageError("image values must lie in [0, 1]")
    return X


def check_masks(y, X: np.ndarray, num_classes: int = 2) -> np.ndarray:
    """Validate binary masks ``(N, num_classes, H, W)`` aligned with ``X``."""
    y = np.asarray(y)
    if y.ndim == 3:
        y = y[None]
    expected = (X.shape[0], num_classes) + X.shape[2:]
    if y.shape != expected:
        raise UsageError(f"masks must have shape {expected}, got {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise UsageError("masks must be binary (0/1)")
    return y.astype(np.float32, copy=False)


_CONFIG_FIELDS = tuple(f.name for f in fields(TrainConfig))


class WaveSDGSegmenter(BaseEstimator):
    """Disc/cup segmenter trained on a single source domain.

    Hyperparameters mirror :class:`wisernet.config.TrainConfig` one to one.
    ``validation_fraction`` is used when ``fit`` gets no explicit
    validation split; the held-out tail is chosen by a seeded permutation.

    Attributes set by ``fit``: ``model_``, ``history_``, ``config_``.
    """

    def __init__(
        self,
        depth=4,
        base_width=8,
        wiser_enabled=True,
        ds_enabled=True,
        alpha=0.5,
        beta=0.5,
        eps_gate=0.25,
        kappa=1.0,
        a0=0.25,
        epochs=100,
        batch_size=8,
        lr=1e-4,
        adam_beta1=0.9,
        adam_beta2=0.999,
        adam_eps=1e-8,
        patience=5,
        ds_weights=(0.2, 0.2, 0.1),
        warmup_epochs=5,
        ramp_epochs=10,
        lambda_max=0.1,
        dice_smooth=1.0,
        weighted_dice=False,
        threshold=0.5,
        validation_fraction=0.2,
        seed=0,
    ):
        self.depth = depth
        self.base_width = base_width
        self.wiser_enabled = wiser_enabled
        self.ds_enabled = ds_enabled
        self.alpha = alpha
        self.beta = beta
        self.eps_gate = eps_gate
        self.kappa = kappa
        self.a0 = a0
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.adam_eps = adam_eps
        self.patience = patience
        self.ds_weights = ds_weights
        self.warmup_epochs = warmup_epochs
        self.ramp_epochs = ramp_epochs
        self.lambda_max = lambda_max
        self.dice_smooth = dice_smooth
        self.weighted_dice = weighted_dice
        self.threshold = threshold
        self.validation_fraction = validation_fraction
        self.seed = seed

    def train_config(self, input_size: int = 64) -> TrainConfig:
        params = {k: v for k, v in self.get_params().items() if k in _CONFIG_FIELDS}
        params["ds_weights"] = tuple(params["ds_weights"])
        return TrainConfig(input_size=input_size, **params)

    def _split(self, X, y) -> Tuple[Tuple[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]:
        if not 0.0 < self.validation_fraction < 1.0:
            raise UsageError(f"validation_fraction must lie in (0, 1), got {self.validation_fraction}")
        n_val = max(1, int(round(len(X) * self.validation_fraction)))
        if n_val >= len(X):
            raise UsageError(f"need at least 2 samples to hold out validation data, got {len(X)}")
        order = np.random.default_rng([self.seed, 3]).permutation(len(X))
        val, train = order[:n_val], order[n_val:]
        return (X[train], y[train]), (X[val], y[val])

    def fit(self, X, y, X_val=None, y_val=None, on_epoch=None):
        multiple = 2 ** (self.depth + 1)
        X = check_images(X, multiple)
        y = check_masks(y, X)
        if (X_val is None) != (y_val is None):
            raise UsageError("pass both X_val and y_val or neither")
        if X_val is None:
            train, val = self._split(X, y)
        else:
            X_val = check_images(X_val, multiple)
            train, val = (X, y), (X_val, check_masks(y_val, X_val))
        cfg = self.train_config(input_size=X.shape[2])
        model = WaveSegNet(cfg.model_config())
        self.model_, self.history_ = fit_model(model, train, val, cfg, on_epoch=on_epoch)
        self.config_ = cfg
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return predict_proba(self.model_, check_images(X, self.model_.config.size_multiple))

    def predict(self, X) -> np.ndarray:
        """Binary ``(N, 2, H, W)`` masks: channel 0 disc, channel 1 cup."""
        return self.predict_proba(X) >= self.threshold

    def transform(self, X, space: str = "bottleneck", level: int = 1) -> np.ndarray:
        """Pooled feature vectors, one row per image."""
        check_is_fitted(self, "model_")
        if space not in SPACES:
            raise UsageError(f"unknown embedding space {space!r}")
        X = check_images(X, self.model_.config.size_multiple)
        return embed(self.model_, X, space, level).vectors

    def score(self, X, y) -> float:
        """Mean disc/cup Dice in percent."""
        probs = self.predict_proba(X)
        return mean_dsc(probs, check_masks(y, np.asarray(X)), self.threshold)["mean"]

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_model(path, self.model_, {"train." + k: v for k, v in self.get_params().items()
                                       if not isinstance(v, tuple)})

    @classmethod
    def load(cls, path) -> "WaveSDGSegmenter":
        model, meta = load_model(path)
        cfg = model.config
        est = cls(
            depth=cfg.depth,
            base_width=cfg.base_width,
            wiser_enabled=cfg.wiser_enabled,
            ds_enabled=cfg.ds_enabled,
            alpha=cfg.alpha,
            beta=cfg.beta,
            eps_gate=cfg.eps_gate,
            kappa=cfg.kappa,
            a0=cfg.a0,
            seed=cfg.seed,
        )
        threshold: Optional[str] = meta.get("train.threshold")
        if threshold is not None:
            est.threshold = float(threshold)
        est.model_ = model
        return est
