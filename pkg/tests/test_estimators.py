import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from morphmark import CoTeachingLandmarker, RegistrationLandmarker, TwoStageLandmarker
from morphmark.c2t import C2TConfig
from morphmark.stage1 import Stage1Config
from morphmark.validation import check_images, check_landmarks, find_exemplar


def _one_shot(ds):
    y = np.full_like(ds.landmarks, np.nan)
    y[0] = ds.landmarks[0]
    return y


def test_validation_helpers():
    assert check_images(np.zeros((4, 4))).shape == (1, 4, 4)
    assert check_images(np.zeros((2, 1, 4, 4))).shape == (2, 4, 4)
    with pytest.raises(ValueError):
        check_images(np.zeros((2, 4, 4)), multiple_of=32)
    with pytest.raises(ValueError):
        check_images(np.full((1, 4, 4), np.nan))
    y = np.full((3, 2, 2), np.nan)
    y[1] = 1.0
    assert find_exemplar(check_landmarks(y, 3, allow_missing=True)) == 1
    with pytest.raises(ValueError):
        check_landmarks(y, 3)
    y[2, 0] = 0.0
    with pytest.raises(ValueError):
        check_landmarks(y, 3, allow_missing=True)
    with pytest.raises(ValueError):
        find_exemplar(np.zeros((3, 2, 2)))


def test_registration_landmarker(tiny_dataset):
    ds = tiny_dataset
    est = RegistrationLandmarker(Stage1Config.desk(1, batch_size=4), random_state=0)
    with pytest.raises(NotFittedError):
        est.predict(ds.images)
    est.fit(ds.images, _one_shot(ds))
    assert est.pseudo_labels_.shape == ds.landmarks.shape
    assert np.array_equal(est.pseudo_labels_[0], ds.landmarks[0])
    assert est.field_point_sign_ in (1, -1)
    pred = est.predict(ds.images[:2])
    assert pred.shape == (2, 5, 2)
    assert est.score(ds.images[:2], ds.landmarks[:2]) <= 0
    assert clone(est).get_params()["random_state"] == 0
    rebuilt = RegistrationLandmarker.from_state(est.model_.state_dict(), est.config_, ds.images[0], ds.landmarks[0], est.field_point_sign_)
    assert np.array_equal(rebuilt.predict(ds.images[:2]), pred)


def test_coteaching_and_two_stage(tiny_dataset):
    ds = tiny_dataset
    c2t = C2TConfig.desk(1, base_channels=4, batch_size=4)
    est = CoTeachingLandmarker(c2t, random_state=1).fit(ds.images, ds.landmarks, exemplar_index=0)
    assert est.predict(ds.images).shape == ds.landmarks.shape
    with pytest.raises(ValueError):
        CoTeachingLandmarker(c2t).fit(ds.images, ds.landmarks, exemplar_index=9)
    two = TwoStageLandmarker(Stage1Config.desk(1, batch_size=4), c2t, random_state=0).fit(ds.images, _one_shot(ds))
    assert two.predict(ds.images[:3]).shape == (3, 5, 2)
    assert np.array_equal(two.pseudo_labels_, two.registration_.pseudo_labels_)
