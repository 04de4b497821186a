import numpy as np
import pytest

from siamese_vad.errors import InvalidInputError
from siamese_vad.roc import partial_auc
from siamese_vad.siamese import init_model, model_to_bytes
from siamese_vad.training import (
    TrainConfig,
    augment_pair,
    preprocess,
    preprocess_patch,
    resample,
    stratified_split,
    train,
)

from conftest import SMALL_ARCH


def test_preprocess_endpoints():
    raw = np.zeros((20, 20, 13))
    raw[0, 0, 0] = 255
    x = preprocess(raw)
    assert x[0, 0, 0] == 1.0 and x[1, 1, 0] == -1.0
    assert np.all(x[..., 1:] == -1.0)
    raw[..., 1:] = 100.0  # beyond the flow scale
    assert np.all(preprocess(raw)[..., 1:] == 1.0)


def test_augment_is_seeded(rng):
    raw = rng.uniform(0, 255, (20, 20, 13))
    a = preprocess_patch(raw, augment=True, rng=np.random.default_rng(3))
    b = preprocess_patch(raw, augment=True, rng=np.random.default_rng(3))
    assert np.array_equal(a, b)
    assert a.min() >= -1 and a.max() <= 1


def test_augment_pair_shares_transform(rng):
    x = rng.uniform(-1, 1, (20, 20, 13)).astype(np.float32)
    a, b = augment_pair(x, x.copy(), np.random.default_rng(1))
    assert np.array_equal(a, b)


def test_resample_identity(rng):
    x = rng.normal(size=(20, 20, 3))
    assert np.allclose(resample(x, 1.0), x)
    shifted = resample(x, 1.0, (0.0, 1.0))
    assert np.allclose(shifted[:, :-1], x[:, 1:])


def test_stratified_split(rng):
    y = np.r_[np.zeros(50), np.ones(30)].astype(int)
    tr, va = stratified_split(y, 0.1, rng)
    assert sorted(np.r_[tr, va].tolist()) == list(range(80))
    assert (y[va] == 0).sum() == 5 and (y[va] == 1).sum() == 3


def toy_pairs(rng, n=80):
    """Similar pairs are noisy copies; dissimilar pairs are unrelated patches."""
    x1 = rng.uniform(-1, 1, (n, 20, 20, 13)).astype(np.float32)
    y = (np.arange(n) % 2).astype(np.uint8)
    x2 = np.where(y[:, None, None, None] == 1,
                  rng.uniform(-1, 1, x1.shape),
                  np.clip(x1 + rng.normal(0, 0.05, x1.shape), -1, 1)).astype(np.float32)
    return x1, x2, y


CFG = TrainConfig(batch_size=8, max_iterations=20, validate_every=5, validation_fraction=0.25, seed=3)


def test_zero_iterations_returns_initial_model(rng):
    x1, x2, y = toy_pairs(rng)
    res = train(x1, x2, y, TrainConfig(batch_size=8, max_iterations=0, validation_fraction=0.25, seed=3),
                SMALL_ARCH)
    assert res.best_step == 0 and len(res.history) == 1
    init_seed = int(np.random.default_rng(3).integers(2**31))
    # the split consumes rng draws first; compare with a model built the same way
    fresh = init_model(SMALL_ARCH, seed=init_seed)
    assert set(res.model.params) == set(fresh.params)
    assert res.model.iterations == 0


def test_training_is_deterministic(rng):
    x1, x2, y = toy_pairs(rng)
    a = train(x1, x2, y, CFG, SMALL_ARCH)
    b = train(x1, x2, y, CFG, SMALL_ARCH)
    assert model_to_bytes(a.model) == model_to_bytes(b.model)
    assert a.best_step == b.best_step
    steps = [h[0] for h in a.history]
    assert steps == list(range(0, 21))
    validated = [h for h in a.history if not np.isnan(h[2])]
    assert [h[0] for h in validated] == [0, 5, 10, 15, 20]
    best = max(validated, key=lambda h: h[2])
    # ties resolve to the earliest validation
    assert a.best_step == min(h[0] for h in validated if h[2] == best[2])
    assert a.model.best_partial_auc == pytest.approx(best[2])


def test_training_input_errors(rng):
    x1, x2, y = toy_pairs(rng, 12)
    with pytest.raises(InvalidInputError):
        train(x1, x2, y, CFG, SMALL_ARCH)  # too few pairs for two batches
    x1, x2, y = toy_pairs(rng)
    with pytest.raises(InvalidInputError):
        train(x1, x2, np.zeros_like(y), CFG, SMALL_ARCH)
    with pytest.raises(InvalidInputError):
        TrainConfig(gamma=0)
    with pytest.raises(InvalidInputError):
        TrainConfig(label_smoothing=0.5)


def test_partial_auc_used_for_selection_matches_direct(rng):
    p = rng.random(50)
    y = (np.arange(50) % 2)
    assert 0 <= partial_auc(p, y) <= 0.3
