"""scikit-learn style wrappers around the two training stages."""

from __future__ import annotations

import copy

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .c2t import C2TConfig, predict as c2t_predict, train_c2t
from .regnet import RegistrationNet
from .stage1 import Stage1Config, infer_pseudo, pseudo_label_array, train_stage1
from .synthbench import evaluate
from .validation import check_images, check_landmarks, find_exemplar


class _LandmarkScoreMixin:
    def score(self, X, y) -> float:
        """Negative mean radial error (higher is better)."""
        pred = self.predict(X)
        y = check_landmarks(y, len(pred))
        return -evaluate(pred, y).mre


class RegistrationLandmarker(_LandmarkScoreMixin, BaseEstimator):
    """One-shot landmark transfer by exemplar-to-target registration.

    ``fit(X, y)`` takes images ``(n, H, W)`` and landmarks ``(n, N, 2)`` in
    which exactly one row is labeled and the others are NaN. After fitting,
    ``pseudo_labels_`` holds the smoothed training-set predictions and
    ``predict`` registers the exemplar onto new images.
    """

    def __init__(self, config: Stage1Config | None = None, random_state: int = 0):
        self.config = config
        self.random_state = random_state

    def fit(self, X, y, log_path=None, checkpoint_path=None, callback=None):
        cfg = copy.deepcopy(self.config) if self.config is not None else Stage1Config()
        X = check_images(X, multiple_of=32)
        y = check_landmarks(y, len(X), allow_missing=True)
        ex = find_exemplar(y)
        if tuple(cfg.regnet.image_size) != X.shape[1:]:
            cfg.regnet.image_size = tuple(X.shape[1:])
        res = train_stage1(X, ex, y[ex], cfg, seed=self.random_state, log_path=log_path, ckpt_path=checkpoint_path, callback=callback)
        self.model_ = res.model
        self.config_ = cfg
        self.exemplar_index_ = ex
        self.exemplar_image_ = X[ex].copy()
        self.exemplar_points_ = y[ex].copy()
        self.field_point_sign_ = res.field_point_sign
        self.pseudo_labels_ = pseudo_label_array(res.store, len(X), ex, y[ex])
        self.log_ = res.log
        self.n_landmarks_ = y.shape[1]
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X)
        return infer_pseudo(self.model_, self.exemplar_image_, self.exemplar_points_, X, self.field_point_sign_)

    @classmethod
    def from_state(cls, state_dict, config: Stage1Config, exemplar_image, exemplar_points, field_point_sign: int):
        """Rebuild a fitted estimator from checkpoint tensors."""
        est = cls(config)
        model = RegistrationNet(config.regnet)
        model.load_state_dict(state_dict)
        model.eval()
        est.model_ = model
        est.config_ = config
        est.exemplar_image_ = np.asarray(exemplar_image, dtype=np.float64)
        est.exemplar_points_ = np.asarray(exemplar_points, dtype=np.float64)
        est.field_point_sign_ = int(field_point_sign)
        est.n_landmarks_ = len(est.exemplar_points_)
        return est


class CoTeachingLandmarker(_LandmarkScoreMixin, BaseEstimator):
    """Two co-taught heatmap detectors trained on noisy pseudo labels.

    ``fit(X, y, exemplar_index)`` takes a label for every image; the row at
    ``exemplar_index`` is treated as clean.
    """

    def __init__(self, config: C2TConfig | None = None, random_state: int = 0, flip_permutation=None):
        self.config = config
        self.random_state = random_state
        self.flip_permutation = flip_permutation

    def fit(self, X, y, exemplar_index: int = 0, log_path=None, callback=None):
        cfg = copy.deepcopy(self.config) if self.config is not None else C2TConfig()
        X = check_images(X, multiple_of=8)
        y = check_landmarks(y, len(X), allow_missing=False)
        if not 0 <= exemplar_index < len(X):
            raise ValueError("exemplar_index out of range")
        res = train_c2t(
            X, y, exemplar_index, y[exemplar_index], cfg, seed=self.random_state,
            flip_permutation=self.flip_permutation, log_path=log_path, callback=callback,
        )
        self.f_, self.g_ = res.f, res.g
        self.config_ = cfg
        self.log_ = res.log
        self.selections_ = res.selections
        self.n_landmarks_ = y.shape[1]
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "f_")
        return c2t_predict(self.f_, self.g_, check_images(X, multiple_of=8))


class TwoStageLandmarker(_LandmarkScoreMixin, BaseEstimator):
    """Registration pseudo labels followed by consistency co-teaching.

    ``y`` follows :class:`RegistrationLandmarker`: one labeled row, NaN elsewhere.
    """

    def __init__(self, stage1: Stage1Config | None = None, stage2: C2TConfig | None = None, random_state: int = 0, flip_permutation=None):
        self.stage1 = stage1
        self.stage2 = stage2
        self.random_state = random_state
        self.flip_permutation = flip_permutation

    def fit(self, X, y):
        X = check_images(X, multiple_of=32)
        y = check_landmarks(y, len(X), allow_missing=True)
        ex = find_exemplar(y)
        self.registration_ = RegistrationLandmarker(self.stage1, self.random_state).fit(X, y)
        self.pseudo_labels_ = self.registration_.pseudo_labels_
        self.detectors_ = CoTeachingLandmarker(self.stage2, self.random_state, self.flip_permutation).fit(X, self.pseudo_labels_, ex)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "detectors_")
        return self.detectors_.predict(X)


def set_threads(n: int | None) -> None:
    if n is not None and n > 0:
        torch.set_num_threads(int(n))
