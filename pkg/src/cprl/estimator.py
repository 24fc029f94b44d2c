"""scikit-learn compatible wrapper around :class:`~cprl.models.QualityNet`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .layer import CprlConfig
from .metrics import evaluate
from .models import QualityNet
from .training import Trainer, TrainConfig


def check_images(X, in_channels=None) -> np.ndarray:
    """Validate an image batch: (N, C, H, W) or (N, H, W), finite, inside [0, 1]."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_2d=False, ensure_min_samples=1)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (N, C, H, W) or (N, H, W), got {X.shape}")
    if in_channels is not None and X.shape[1] != in_channels:
        raise ValueError(f"expected {in_channels} channel(s), got {X.shape[1]}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = check_array(np.asarray(y).reshape(-1, 1), dtype=np.float64).ravel()
    if len(y) != n:
        raise ValueError(f"{n} images but {len(y)} labels")
    if y.min() < 0.0 or y.max() > 1.0:
        raise ValueError("labels must be normalized to [0, 1]")
    return y


class QualityRegressor(RegressorMixin, BaseEstimator):
    """No-reference quality regressor with optional CPRL channel gating.

    Parameters
    ----------
    cprl : bool
        Insert the soft-rank channel gate after global pooling.
    pns : bool
        Train with the min-max PNS risk (ignored without ``cprl``). ``False``
        gives the mask-only ablation.
    channels, bias, tau, s_branch :
        Gate settings, see :class:`~cprl.layer.CprlConfig`.
    epochs, batch_size, lr, adversary_lr, weight_decay, grad_clip, objective, sn_iters :
        Optimization settings, see :class:`~cprl.training.TrainConfig`.
    random_state : int
        Seeds initialization and batch order.
    """

    def __init__(self, cprl=True, pns=True, channels=32, bias=0.4, tau=1.0, s_branch="printed",
                 epochs=10, batch_size=16, lr=3e-5, adversary_lr=None, weight_decay=0.01,
                 grad_clip=5.0, objective="full", sn_iters=1, random_state=0):
        self.cprl = cprl
        self.pns = pns
        self.channels = channels
        self.bias = bias
        self.tau = tau
        self.s_branch = s_branch
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.adversary_lr = adversary_lr
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.objective = objective
        self.sn_iters = sn_iters
        self.random_state = random_state

    def _cprl_config(self) -> CprlConfig:
        return CprlConfig(channels=self.channels, bias=self.bias, tau=self.tau, s_branch=self.s_branch)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           adversary_lr=self.adversary_lr, weight_decay=self.weight_decay,
                           grad_clip=self.grad_clip, seed=self.random_state, pns=self.pns,
                           objective=self.objective, sn_iters=self.sn_iters)

    def build(self, in_channels: int = 1) -> "QualityRegressor":
        """Create the untrained network without fitting."""
        self.model_ = QualityNet(in_channels, self._cprl_config(), self.cprl, seed=self.random_state)
        self.curve_ = []
        return self

    def fit(self, X, y, eval_set=None, checkpoint_path=None):
        X = check_images(X)
        y = check_labels(y, len(X))
        if eval_set is not None:
            Xe = check_images(eval_set[0], X.shape[1])
            eval_set = (Xe, check_labels(eval_set[1], len(Xe)))
        self.build(X.shape[1])
        self.trainer_ = Trainer(self.model_, self._train_config())
        self.curve_ = self.trainer_.fit(X, y, eval_set, checkpoint_path)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.predict(check_images(X, self.model_.in_channels))

    def features(self, X) -> np.ndarray:
        """Pooled backbone features, shape (N, channels)."""
        from .autodiff import Tensor, no_grad

        check_is_fitted(self, "model_")
        with no_grad():
            return self.model_.features(Tensor(check_images(X, self.model_.in_channels))).data

    def evaluate(self, X, y) -> dict:
        """SRCC / PLCC / MSE of the predictions against ``y``."""
        return evaluate(self.predict(X), y)

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_.state_dict())

    def load(self, path, in_channels: int = 1) -> "QualityRegressor":
        self.build(in_channels)
        self.model_.load_state_dict(load_checkpoint(path))
        return self
