import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gliomaseg.patch_sampler import (ChannelStats, PatchSample, Subject, compute_sampling_weights,
                                     draw_centers, estimate_channel_stats, lr_flip, sample_patch,
                                     standardize)


def weight_fixture():
    """Valid-center grid of 10x10x1 for N=8: 10 tumor, 20 dark, 70 other centers."""
    shape = (17, 17, 8)
    vol = np.full(shape + (4,), 0.8, np.float32)
    labels = np.zeros(shape, np.uint8)
    centers = [(i, j, 4) for i in range(4, 14) for j in range(4, 14)]
    for n, c in enumerate(centers[:10]):
        labels[c] = 2
    for n, c in enumerate(centers[10:30]):
        vol[c] = 0.001 * (n + 1)
    return vol, labels, centers


def test_weight_rules():
    vol, labels, centers = weight_fixture()
    w = compute_sampling_weights(vol, labels, 8)
    assert w.weights.shape == (10, 10, 1)
    assert w.lo == (4, 4, 4) and w.hi == (13, 13, 4)
    got = {c: int(w.weights[c[0] - 4, c[1] - 4, 0]) for c in centers}
    assert [got[c] for c in centers[:10]] == [6] * 10
    assert [got[c] for c in centers[10:30]] == [1] * 20
    assert [got[c] for c in centers[30:]] == [3] * 70
    assert w.probabilities().sum() == pytest.approx(1.0, abs=1e-15)


def test_foreground_beats_low_intensity():
    vol = np.full((9, 9, 9, 4), 0.5, np.float32)
    vol[4, 4, 4] = 0.0
    labels = np.zeros((9, 9, 9), np.uint8)
    labels[4, 4, 4] = 3
    w = compute_sampling_weights(vol, labels, 1)
    assert w.weights[4, 4, 4] == 6


def test_flat_air_gets_no_low_weight():
    # more than 1% of voxels at the minimum: strict inequality selects none
    vol = np.zeros((10, 10, 10, 4), np.float32)
    vol[3:7, 3:7, 3:7] = 0.7
    w = compute_sampling_weights(vol, np.zeros((10, 10, 10), np.uint8), 4)
    assert set(np.unique(w.weights)) == {3}


def test_patch_larger_than_volume():
    with pytest.raises(ValueError, match="exceeds"):
        compute_sampling_weights(np.zeros((4, 4, 4, 4)), np.zeros((4, 4, 4), np.uint8), 5)


def test_single_valid_center_always_chosen(rng):
    vol = rng.random((8, 8, 8, 4)).astype(np.float32)
    labels = np.zeros((8, 8, 8), np.uint8)
    w = compute_sampling_weights(vol, labels, 8)
    for _ in range(20):
        p = sample_patch(rng, w, vol, labels, 8)
        assert p.center == (4, 4, 4)


def test_sampling_is_seed_deterministic():
    vol, labels, _ = weight_fixture()
    w = compute_sampling_weights(vol, labels, 8)
    a = sample_patch(np.random.default_rng(7), w, vol, labels, 8)
    b = sample_patch(np.random.default_rng(7), w, vol, labels, 8)
    assert a.center == b.center and a.flipped == b.flipped
    np.testing.assert_array_equal(a.image, b.image)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 9), st.tuples(*[st.integers(9, 16)] * 3))
def test_patches_stay_inside(seed, n, shape):
    rng = np.random.default_rng(seed)
    vol = rng.random(shape + (4,)).astype(np.float32)
    labels = (rng.random(shape) > 0.9).astype(np.uint8)
    w = compute_sampling_weights(vol, labels, n)
    for c in draw_centers(rng, w, 50):
        start = c - n // 2
        assert np.all(start >= 0) and np.all(start + n <= np.array(shape))
    p = sample_patch(rng, w, vol, labels, n)
    assert p.image.shape == (n, n, n, 4) and p.labels.shape == (n, n, n)


def test_flip_examples():
    img = np.zeros((4, 4, 4, 4), np.float32)
    lab = np.zeros((4, 4, 4), np.uint8)
    img[1, 2, 0] = 1.0
    lab[1, 2, 0] = 2
    p = PatchSample(img, lab, (2, 2, 2))
    f = lr_flip(p)
    assert f.flipped and f.labels[1, 2, 3] == 2 and f.image[1, 2, 3, 0] == 1.0
    back = lr_flip(f)
    assert not back.flipped
    np.testing.assert_array_equal(back.image, img)
    np.testing.assert_array_equal(back.labels, lab)
    sym = PatchSample(np.ones((4, 4, 4, 4), np.float32), np.ones((4, 4, 4), np.uint8), (2, 2, 2))
    fs = lr_flip(sym)
    assert fs.flipped
    np.testing.assert_array_equal(fs.image, sym.image)


@given(st.integers(0, 1000))
def test_flip_is_involution(seed):
    rng = np.random.default_rng(seed)
    p = PatchSample(rng.random((3, 4, 5, 4)), rng.integers(0, 4, (3, 4, 5)), (0, 0, 0))
    q = lr_flip(lr_flip(p))
    np.testing.assert_array_equal(q.image, p.image)
    np.testing.assert_array_equal(q.labels, p.labels)
    assert q.flipped == p.flipped


def test_stats_constant_volume_fails(rng):
    s = Subject("c", np.full((8, 8, 8, 4), 0.5, np.float32), np.zeros((8, 8, 8), np.uint8))
    with pytest.raises(ValueError, match="zero standard deviation"):
        estimate_channel_stats([s], 4, rng, draws=10)


def test_stats_full_volume_single_draw(rng):
    img = rng.random((6, 6, 6, 4))
    s = Subject("a", img, np.zeros((6, 6, 6), np.uint8))
    st_ = estimate_channel_stats([s], 6, rng, draws=1)
    np.testing.assert_allclose(st_.mean, img.reshape(-1, 4).mean(0), rtol=1e-12)
    np.testing.assert_allclose(st_.std, img.reshape(-1, 4).std(0), rtol=1e-12)


def test_stats_pooled_moments_match_concatenation(rng):
    # the streaming merge must equal statistics over all drawn voxels at once
    img = rng.random((10, 10, 10, 4))
    s = Subject("a", img, np.zeros((10, 10, 10), np.uint8))
    est = estimate_channel_stats([s], 4, np.random.default_rng(5), draws=30)
    r = np.random.default_rng(5)
    chunks = []
    for _ in range(30):
        r.integers(1)
        chunks.append(sample_patch(r, s.weights(4), s.image, s.labels, 4).image.reshape(-1, 4))
    allv = np.concatenate(chunks)
    np.testing.assert_allclose(est.mean, allv.mean(0), rtol=1e-10)
    np.testing.assert_allclose(est.std, allv.std(0), rtol=1e-10)


def test_stats_two_subject_mixture():
    gen = np.random.default_rng(11)
    n = 6
    subjects = []
    for sid, level in (("a", np.array([0.2, 0.3, 0.4, 0.5])), ("b", np.array([0.6, 0.5, 0.8, 0.7]))):
        img = np.clip(level + 0.05 * gen.standard_normal((12, 12, 12, 4)), 0, 1)
        # uniform center weights so the mixture mean has a closed form
        subjects.append(Subject(sid, img, np.ones((12, 12, 12), np.uint8)))
    # expected value: average over subjects of the mean over every valid patch
    expected = np.zeros(4)
    for s in subjects:
        starts = range(12 - n + 1)
        means = [s.image[i:i + n, j:j + n, k:k + n].reshape(-1, 4).mean(0)
                 for i in starts for j in starts for k in starts]
        expected += np.mean(means, axis=0) / len(subjects)
    est = estimate_channel_stats(subjects, n, np.random.default_rng(3), draws=400)
    # standard error of the 400-draw mean, dominated by which subject is drawn
    per_draw_sd = np.abs(np.array([0.2, 0.3, 0.4, 0.5]) - np.array([0.6, 0.5, 0.8, 0.7])) / 2
    se = per_draw_sd / np.sqrt(400)
    assert np.all(np.abs(est.mean - expected) <= 3 * se)


def test_standardize_examples():
    img = np.zeros((2, 2, 2, 4), np.float32)
    img[0] = 1.0
    p = PatchSample(img, np.zeros((2, 2, 2), np.uint8), (1, 1, 1))
    ident = standardize(p, ChannelStats(np.zeros(4), np.ones(4)))
    np.testing.assert_array_equal(ident.image, p.image)
    pm = standardize(p, ChannelStats(np.full(4, 0.5), np.full(4, 0.5)))
    assert set(np.unique(pm.image)) == {-1.0, 1.0}
    np.testing.assert_array_equal(pm.labels, p.labels)
    const = PatchSample(np.full((2, 2, 2, 4), 0.3, np.float32), np.zeros((2, 2, 2), np.uint8), (1, 1, 1))
    z = standardize(const, ChannelStats(np.full(4, np.float32(0.3)), np.full(4, 2.0)))
    assert np.all(z.image == 0)


def test_stats_file_round_trip(tmp_path):
    s = ChannelStats(np.array([0.1, 0.2, 0.3, 0.4]), np.array([1.0, 2.0, 3.0, 4.0]))
    s.save(tmp_path / "s.json")
    back = ChannelStats.load(tmp_path / "s.json")
    np.testing.assert_array_equal(back.mean, s.mean)
    np.testing.assert_array_equal(back.std, s.std)
