import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from siamese_vad.errors import CurationError, DataFormatError, EmptyRegionError, InvalidInputError
from siamese_vad.media import DatasetPartition, FrameSequence
from siamese_vad.pairs import (
    PROVENANCE,
    CurationConfig,
    anomaly_status,
    curate_pairs,
    fit_threshold,
    inverse_distance_acceptance,
    nn_over_train,
    normalized_l1,
    pairs_from_bytes,
    pairs_to_bytes,
    self_augment,
)
from siamese_vad.patches import VideoPatch
from siamese_vad.synthetic import AnomalyInjection, SyntheticSceneSpec, generate_synthetic


def l1_oracle(a, b):
    total = 0.0
    for u, v in zip(np.ravel(a).tolist(), np.ravel(b).tolist()):
        total += abs(u - v)
    return total / 5200


def rand_patch(rng):
    return rng.uniform(-1, 1, (20, 20, 13))


def test_l1_endpoints(rng):
    a = rand_patch(rng)
    assert normalized_l1(a, a) == 0.0
    assert normalized_l1(np.ones((20, 20, 13)), -np.ones((20, 20, 13))) == 2.0
    assert normalized_l1(VideoPatch(a, 0, 0), VideoPatch(a, 0, 0)) == 0.0


def test_l1_matches_loop_oracle(rng):
    a, b = rand_patch(rng), rand_patch(rng)
    assert abs(normalized_l1(a, b) - l1_oracle(a, b)) < 1e-9


def test_l1_shape_mismatch():
    with pytest.raises(InvalidInputError):
        normalized_l1(np.zeros((20, 20, 13)), np.zeros((20, 20, 12)))


def test_nn_exact_copy_and_singleton(rng):
    train = [rand_patch(rng) for _ in range(5)]
    i, d = nn_over_train(train[3].copy(), train)
    assert (i, d) == (3, 0.0)
    far = np.full((20, 20, 13), 5.0)
    assert nn_over_train(far, train[:1])[0] == 0
    with pytest.raises(EmptyRegionError):
        nn_over_train(far, [])


@pytest.mark.parametrize("n", [50, 100])
def test_nn_matches_linear_rescan(rng, n):
    train = [rand_patch(rng) for _ in range(n)]
    for _ in range(3):
        q = rand_patch(rng)
        best_i, best_d = None, np.inf
        for i, t in enumerate(train):
            d = l1_oracle(q, t)
            if d < best_d:
                best_i, best_d = i, d
        i, d = nn_over_train(q, train)
        assert i == best_i and abs(d - best_d) < 1e-9


def test_nn_ties_go_to_earliest(rng):
    a = rand_patch(rng)
    i, _ = nn_over_train(a, [a + 0.5, a.copy(), a.copy()])
    assert i == 1


def test_threshold_examples():
    assert fit_threshold([0.4] * 5).value == pytest.approx(0.4, abs=1e-15)
    t = fit_threshold([0.1, 0.3])
    assert (t.mu, t.sigma) == pytest.approx((0.2, 0.1))
    assert t.value == pytest.approx(0.22)
    with pytest.raises(InvalidInputError):
        fit_threshold([])


def test_threshold_matches_scalar_oracle():
    d = np.random.default_rng(3).gamma(2.0, 0.05, 1000).tolist()
    mu = sum(d) / len(d)
    sigma = (sum((x - mu) ** 2 for x in d) / len(d)) ** 0.5
    assert abs(fit_threshold(d).value - (mu + 0.2 * sigma)) < 1e-12


@given(st.floats(1e-3, 1.0), st.floats(1e-3, 2.0), st.floats(1e-3, 2.0))
def test_acceptance_is_monotone(d_min, a, b):
    lo, hi = sorted((a, b))
    assert inverse_distance_acceptance(d_min, hi) <= inverse_distance_acceptance(d_min, lo)
    assert inverse_distance_acceptance(d_min, d_min) == 1.0


def test_anomaly_status():
    from scipy import ndimage
    mask = np.zeros((40, 40), bool)
    comps = lambda m: (lambda lab: (lab[0], np.bincount(lab[0].ravel())))(ndimage.label(m, np.ones((3, 3))))
    assert anomaly_status(mask, comps(mask), 0, 0, 20, 20) == 0
    mask[0:20, 0:10] = True
    assert anomaly_status(mask, comps(mask), 0, 0, 20, 20) == 1
    small = np.zeros((40, 40), bool)
    small[2:6, 2:6] = True  # whole small anomaly inside the footprint
    assert anomaly_status(small, comps(small), 0, 0, 20, 20) == 1
    straddle = np.zeros((40, 40), bool)
    straddle[0:20, 18:40] = True
    assert anomaly_status(straddle, comps(straddle), 0, 0, 20, 20) == -1


def test_self_augment_deterministic(rng):
    x = rand_patch(rng).astype(np.float32)
    a = self_augment(x, np.random.default_rng(5))
    b = self_augment(x, np.random.default_rng(5))
    assert a.shape == x.shape and np.array_equal(a, b)


# ---------------------------------------------------------------- curation


def noise_source(n_train=10, n_test=10, anomalous_frames=(), seed=0):
    """20x20 frames of fresh noise: every patch passes the gate; one region per frame."""
    rng = np.random.default_rng(seed)
    train = DatasetPartition("train", [FrameSequence(rng.uniform(0, 255, (n_train, 20, 20)), "tr")])
    test_frames = rng.uniform(0, 255, (n_test, 20, 20))
    masks = np.zeros(test_frames.shape, bool)
    for t in anomalous_frames:
        masks[t] = True
    test = DatasetPartition("test", [FrameSequence(test_frames, "te")], {"te": masks})
    return train, test


def test_no_anomalies_is_a_curation_error():
    train, _ = noise_source()
    test = DatasetPartition("test", train.sequences, {"tr": np.zeros((10, 20, 20), bool)})
    with pytest.raises(CurationError):
        curate_pairs([(train, test)], CurationConfig(pairs_per_class=10))


def test_single_anomalous_patch_negative_cap():
    src = noise_source(n_train=12, anomalous_frames=(2,))
    pairs = curate_pairs([src], CurationConfig(pairs_per_class=100, negatives_per_anomaly=5, seed=1))
    prov = [PROVENANCE[p] for p in pairs.provenance]
    assert prov.count("hard_negative") == 1
    assert prov.count("sampled_negative") <= 4
    # sampled partners differ from the hard negative partner
    hard = pairs.x2[pairs.provenance == 1][0]
    for b in pairs.x2[pairs.provenance == 2]:
        assert not np.array_equal(b, hard)


@pytest.fixture(scope="module")
def synthetic_pairs():
    spec = SyntheticSceneSpec(n_train_frames=60, n_test_frames=80, seed=11,
                              anomalies=(AnomalyInjection("fast_mover", 10, 60),))
    src = generate_synthetic(spec)
    cfg = CurationConfig(pairs_per_class=300, seed=2)
    return src, cfg, curate_pairs([src], cfg)


def test_curation_invariants(synthetic_pairs):
    _, _, pairs = synthetic_pairs
    n0, n1 = pairs.class_counts()
    assert n0 == n1 > 0
    for k, name in enumerate(PROVENANCE):
        sel = pairs.provenance == k
        expect = 0 if name in ("nn_match", "self_augmented") else 1
        assert np.all(pairs.y[sel] == expect)
    nn = pairs.provenance == 0
    assert np.all(pairs.pre_distance[nn] <= pairs.thresholds["similar"].value + 1e-6)
    assert np.all(np.isnan(pairs.pre_distance[pairs.provenance == 3]))
    hard = pairs.provenance == 1
    assert np.all(pairs.pre_distance[hard] >= pairs.thresholds["dissimilar"].value - 1e-6)
    assert pairs.x1.min() >= -1 and pairs.x1.max() <= 1
    # recorded pre-distances are the L1 between the stored patches
    for i in np.nonzero(~np.isnan(pairs.pre_distance))[0][:20]:
        assert normalized_l1(pairs.x1[i], pairs.x2[i]) == pytest.approx(pairs.pre_distance[i], abs=1e-5)


def test_curation_is_deterministic(synthetic_pairs):
    src, cfg, pairs = synthetic_pairs
    again = curate_pairs([src], cfg)
    assert pairs_to_bytes(again) == pairs_to_bytes(pairs)


def test_pair_file_round_trip(synthetic_pairs):
    _, _, pairs = synthetic_pairs
    data = pairs_to_bytes(pairs)
    back = pairs_from_bytes(data)
    assert np.array_equal(back.x1, pairs.x1) and np.array_equal(back.y, pairs.y)
    assert np.array_equal(np.isnan(back.pre_distance), np.isnan(pairs.pre_distance))
    assert back[0].label == pairs[0].label
    with pytest.raises(DataFormatError):
        pairs_from_bytes(data[:-1])
    with pytest.raises(DataFormatError):
        pairs_from_bytes(b"VADP2" + data[5:])
