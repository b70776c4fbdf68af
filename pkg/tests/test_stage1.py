import json
from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from morphmark.autodiff import load_checkpoint
from morphmark.regnet import RegistrationNet, RegnetConfig
from morphmark.stage1 import (
    PseudoLabelStore,
    Stage1Config,
    ema_update,
    infer_pseudo,
    lambda1_at,
    lambda3_at,
    lr_at,
    make_batch,
    pseudo_label_array,
    select_field_point_sign,
    train_stage1,
)


# --- schedules

def test_schedule_endpoints():
    cfg = Stage1Config()
    assert lambda1_at(0, cfg) == 0
    assert lambda1_at(cfg.switch_epoch, cfg) == 1
    assert lambda3_at(0, cfg) == pytest.approx(5.0)
    assert lambda3_at(cfg.epochs - 1, cfg) == pytest.approx(0.0, abs=1e-12)
    assert lr_at(0, cfg) == 1e-4
    assert lr_at(cfg.switch_epoch - 1, cfg) == 1e-4
    assert lr_at(cfg.epochs - 1, cfg) == pytest.approx(5e-5)
    assert cfg.switch_epoch == 30 and cfg.ema_start_epoch == 24


def test_scaled_keeps_phase_fractions():
    full = Stage1Config.scaled(1.0)
    assert full.epochs == 750 and full.switch_epoch == 250 and full.ema_start_epoch == 200
    small = Stage1Config.scaled(0.04)
    assert small.epochs == 30 and small.switch_epoch == 10 and small.ema_start_epoch == 8
    with pytest.raises(ValueError):
        Stage1Config.scaled(0)


@given(st.integers(1, 200))
def test_schedules_monotone(epochs):
    cfg = Stage1Config(epochs=epochs)
    l1 = [lambda1_at(e, cfg) for e in range(epochs)]
    l3 = [lambda3_at(e, cfg) for e in range(epochs)]
    lr = [lr_at(e, cfg) for e in range(epochs)]
    assert all(a <= b for a, b in zip(l1, l1[1:]))
    assert all(a >= b - 1e-15 for a, b in zip(l3, l3[1:]))
    assert all(a >= b - 1e-15 for a, b in zip(lr, lr[1:]))
    assert all(0 <= v <= 1 for v in l1)


def test_config_validation_and_roundtrip():
    cfg = Stage1Config.desk(5)
    assert Stage1Config.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    for bad in (dict(batch_size=3), dict(tau=1.0), dict(field_point_sign=0)):
        with pytest.raises(ValueError):
            Stage1Config(**bad).validate()


# --- EMA store

def test_ema_examples():
    store = PseudoLabelStore()
    ema_update(store, 1, [[10.0, 10.0]], 0.9)
    ema_update(store, 1, [[20.0, 20.0]], 0.9)
    assert np.array_equal(store.get(1), [[11.0, 11.0]])
    store0 = PseudoLabelStore()
    for v in (3.0, 7.0, -2.0):
        ema_update(store0, "k", [[v, v]], 0.0)
        assert np.array_equal(store0.get("k"), [[v, v]])


def test_ema_geometric_convergence():
    tau, c = 0.9, np.array([[4.0, -3.0]])
    store = PseudoLabelStore()
    ema_update(store, 0, np.zeros((1, 2)), tau)
    err0 = np.abs(store.get(0) - c)
    for k in range(1, 21):
        ema_update(store, 0, c, tau)
        assert np.allclose(np.abs(store.get(0) - c), err0 * tau**k, rtol=1e-12, atol=1e-13)


def test_ema_rejects_nan_without_side_effects():
    store = PseudoLabelStore()
    ema_update(store, 0, [[1.0, 2.0]], 0.9)
    with pytest.raises(ValueError):
        ema_update(store, 0, [[np.nan, 2.0]], 0.9)
    assert store.count[0] == 1 and np.array_equal(store.get(0), [[1.0, 2.0]])
    with pytest.raises(ValueError):
        ema_update(store, 0, [[1.0, 2.0]], 1.0)


# --- batches

def test_make_batch_contract():
    pairs = make_batch(10, 4, seed=5)
    assert sum(p.synthetic for p in pairs) == 2
    assert all(p.truth.shape == (2, 64, 64) for p in pairs if p.synthetic)
    assert all(p.src != p.dst for p in pairs if not p.synthetic)
    again = make_batch(10, 4, seed=5)
    assert [(p.src, p.dst) for p in pairs] == [(p.src, p.dst) for p in again]
    assert all(np.array_equal(a.truth, b.truth) for a, b in zip(pairs, again) if a.synthetic)
    with pytest.raises(ValueError):
        make_batch(1, 2, 0)
    with pytest.raises(ValueError):
        make_batch(10, 3, 0)


def test_make_batch_real_sampler_uniform():
    counts = Counter()
    for s in range(1000):
        counts.update(p.dst for p in make_batch(10, 2, seed=s, size=(32, 32)))
    expected = 2000 / 10
    assert all(abs(counts[i] - expected) <= 0.2 * expected for i in range(10))


def test_field_sign_selection_prefers_backward_convention():
    sign, scores = select_field_point_sign((64, 64), trials=4, strength=1.0, seed=0)
    assert sign == -1 and scores[-1] < scores[1]


# --- inference and training plumbing

def test_infer_identity_model_copies_landmarks(rng):
    torch.manual_seed(0)
    model = RegistrationNet(RegnetConfig())
    ex = rng.random((64, 64))
    pts = np.array([[10.0, 12.0], [40.5, 33.25]])
    targets = rng.random((3, 64, 64))
    out = infer_pseudo(model, ex, pts, targets)
    assert np.array_equal(out, np.broadcast_to(pts, (3, 2, 2)))
    assert np.array_equal(out, infer_pseudo(model, ex, pts, targets))


def test_one_epoch_smoke(tmp_path, tiny_dataset):
    ds = tiny_dataset
    cfg = Stage1Config.desk(1, batch_size=4, regnet=RegnetConfig(image_size=ds.images.shape[1:]))
    res = train_stage1(ds.images[:4], 0, ds.landmarks[0], cfg, seed=1, log_path=tmp_path / "log.jsonl", ckpt_path=tmp_path / "m.ckpt")
    lines = [json.loads(s) for s in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert lines[0]["event"] == "field_point_sign"
    steps = [d for d in lines if "step" in d]
    assert len(steps) == len(res.log) == 1
    assert set(load_checkpoint(tmp_path / "m.ckpt")) == set(res.model.state_dict())
    labels = pseudo_label_array(res.store, 4, 0, ds.landmarks[0])
    assert labels.shape == (4, ds.landmarks.shape[1], 2) and np.isfinite(labels).all()
    assert np.array_equal(labels[0], ds.landmarks[0])


def test_training_is_deterministic(tmp_path, tiny_dataset):
    ds = tiny_dataset
    cfg = Stage1Config.desk(1, batch_size=4, regnet=RegnetConfig(image_size=ds.images.shape[1:]))
    for name in ("a", "b"):
        train_stage1(ds.images[:4], 0, ds.landmarks[0], cfg, seed=2, log_path=tmp_path / f"{name}.jsonl", ckpt_path=tmp_path / f"{name}.ckpt")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_lambda1_zero_leaves_local_head_untouched_by_similarity(tiny_dataset):
    ds = tiny_dataset
    cfg = Stage1Config(epochs=1, batch_size=4, lambda3_start=0.0, ramp_fraction=1e6, weight_decay=0.0, regnet=RegnetConfig(image_size=ds.images.shape[1:]))
    torch.manual_seed(4)
    before = {k: v.clone() for k, v in RegistrationNet(cfg.regnet).local_head.state_dict().items()}
    res = train_stage1(ds.images[:4], 0, ds.landmarks[0], cfg, seed=4)
    after = res.model.local_head.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_rejects_wrong_image_size(tiny_dataset):
    cfg = Stage1Config(epochs=1, regnet=RegnetConfig(image_size=(96, 96)))
    with pytest.raises(ValueError):
        train_stage1(tiny_dataset.images, 0, tiny_dataset.landmarks[0], cfg)
