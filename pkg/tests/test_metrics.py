import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from antn import metrics as mt
from antn.errors import DataError
from antn.segnets import CleanNet, MiniUNetSpec, TransitionNet


def checkerboard(a=(0.9, 0.1, 0.1), b=(0.1, 0.1, 0.9), n=8):
    seg = np.indices((n, n)).sum(axis=0) % 2
    img = np.where(seg[..., None] == 0, np.array(a), np.array(b))
    return img, seg


def test_accuracy_counts():
    t = np.random.default_rng(0).integers(0, 4, size=100)
    p = t.copy()
    assert mt.pixel_accuracy(p, t) == 1.0
    p[[3, 50, 97]] = (p[[3, 50, 97]] + 1) % 4
    assert mt.pixel_accuracy(p, t) == pytest.approx(0.97)


@given(arrays(np.int64, 30, elements=st.integers(0, 3)), arrays(np.int64, 30, elements=st.integers(0, 3)),
       st.permutations(range(4)))
def test_accuracy_permutation_symmetric(p, t, perm):
    perm = np.array(perm)
    assert mt.pixel_accuracy(perm[p], perm[t]) == mt.pixel_accuracy(p, t)


def test_accuracy_shape_mismatch():
    with pytest.raises(DataError):
        mt.pixel_accuracy(np.zeros(3), np.zeros(4))


def test_cross_entropy_values():
    assert mt.cross_entropy_curve(np.eye(3)[[0, 2]], np.array([0, 2])) == 0.0
    assert mt.cross_entropy_curve(np.full((5, 4), 0.25), np.arange(5) % 4) == pytest.approx(np.log(4))
    pred = np.array([[0.8, 0.2], [0.8, 0.2]])
    assert mt.cross_entropy_curve(pred, np.array([0, 1])) == pytest.approx(0.916290, abs=1e-6)


def test_clean_noisy_ratio_cases():
    noisy = np.array([0, 1, 0, 1, 0, 1, 0, 1, 0, 1])
    post = np.eye(2)[noisy]
    assert mt.clean_noisy_ratio(post, noisy) == float("inf")
    post[:2] = post[:2, ::-1]
    assert mt.clean_noisy_ratio(post, noisy) == 4.0
    post[:5] = np.eye(2)[1 - noisy[:5]]
    assert mt.clean_noisy_ratio(post, noisy) == 1.0


@given(arrays(np.float64, (12, 3), elements=st.floats(0.01, 1)), st.floats(0.1, 10))
def test_ratio_invariant_under_monotone_rescaling(post, k):
    noisy = np.arange(12) % 3
    assert mt.clean_noisy_ratio(post, noisy) == mt.clean_noisy_ratio(np.log(post) * k + 3, noisy)


def test_expected_transition_identity_and_flip():
    clean = np.array([[0, 1], [2, 3]])
    mat, rows = mt.expected_transition(clean, clean, 4)
    assert rows.all() and np.array_equal(mat, np.eye(4))
    noisy = np.where(clean == 0, 1, clean)
    mat, _ = mt.expected_transition(clean, noisy, 4)
    assert np.array_equal(mat[0], [0, 1, 0, 0])
    assert np.array_equal(mat[1:], np.eye(4)[1:])


def test_expected_transition_missing_class_is_nan():
    clean = np.array([[0, 0], [1, 1]])
    mat, rows = mt.expected_transition([clean], [clean], 3)
    assert rows.tolist() == [True, True, False]
    assert np.all(np.isnan(mat[2]))


@given(arrays(np.int64, 40, elements=st.integers(0, 3)), arrays(np.int64, 40, elements=st.integers(0, 3)))
def test_expected_transition_rows_sum_to_one(c, n):
    mat, rows = mt.expected_transition([c.reshape(5, 8)], [n.reshape(5, 8)], 4)
    assert np.allclose(mat[rows].sum(axis=1), 1.0, atol=1e-9)


def test_average_transition_zero_head_uniform(rng):
    net = TransitionNet(MiniUNetSpec(base_filters=2, num_classes=3))
    net.params["head.w"][...] = 0
    net.params["head.b"][...] = 0
    avg = mt.average_transition(net, [rng.uniform(size=(4, 4, 3))])
    assert np.allclose(avg, 1 / 3)


def test_average_of_single_pixel_field():
    f = np.random.default_rng(3).dirichlet(np.ones(3), size=(1, 1, 3))
    assert np.array_equal(mt.average_transition_fields([f]), f[0, 0])


def test_frobenius_distance_rows():
    a, b = np.eye(2), np.zeros((2, 2))
    assert mt.frobenius_distance(a, b) == pytest.approx(np.sqrt(2))
    assert mt.frobenius_distance(a, b, np.array([True, False])) == 1.0


def test_uniformity_constant_segments_is_zero():
    img, seg = checkerboard()
    assert mt.uniformity_disparity(img, seg) == pytest.approx(0.0, abs=1e-12)


def test_uniformity_identical_means_is_inf():
    img = np.full((4, 4, 3), 0.5)
    seg = np.indices((4, 4)).sum(axis=0) % 2
    assert mt.uniformity_disparity(img, seg) == float("inf")


def test_uniformity_needs_two_segments():
    with pytest.raises(DataError):
        mt.uniformity_disparity(np.zeros((2, 2, 3)), np.zeros((2, 2), dtype=int))


def test_uniformity_hand_computed_two_segments():
    # Two segments of one pixel each: U = 0, D = ||lab_a - lab_b||.
    # Three pixels, segments {a, a'} and {b}: U = (2/3) * ||lab_a - lab_a'|| / 2.
    from skimage.color import rgb2lab

    img = np.array([[[1.0, 0, 0], [0.8, 0, 0], [0, 0, 1.0]]])
    lab = rgb2lab(img)[0]
    mu = lab[:2].mean(axis=0)
    u = (2 / 3) * np.linalg.norm(lab[0] - lab[1]) / 2
    d = np.linalg.norm(mu - lab[2])
    assert mt.uniformity_disparity(img, np.array([[0, 0, 1]])) == pytest.approx(u / d, rel=1e-12)


@given(st.permutations(range(3)))
def test_uniformity_invariant_to_class_permutation(perm):
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(6, 6, 3))
    seg = rng.integers(0, 3, size=(6, 6))
    assert mt.uniformity_disparity(img, np.array(perm)[seg]) == pytest.approx(
        mt.uniformity_disparity(img, seg), rel=1e-12
    )


def test_checkerboard_correct_beats_random():
    img, seg = checkerboard()
    good = mt.uniformity_disparity(img, seg)
    rng = np.random.default_rng(0)
    for _ in range(10):
        assert mt.uniformity_disparity(img, rng.integers(0, 2, size=seg.shape)) > good


def test_heatmap_levels():
    m = np.array([[1.0, 0.0], [0.5, np.nan]])
    assert mt.transition_heatmap(m).tolist() == [[255, 0], [128, 0]]
