import numpy as np
import pytest

from setkd.feature_kd import (
    AdaptationLayer,
    feat_kd_target_aware,
    feat_kd_target_aware_grad,
    feat_kd_vanilla,
    mean_mask,
    quality_score,
    quality_weighted_mask,
    query_mask,
    query_masks,
)

IDENTITY1 = AdaptationLayer(np.eye(1), np.zeros(1))


def test_constant_features_give_uniform_mask():
    f = np.ones((2, 2, 2))
    np.testing.assert_allclose(query_mask(f, [1.0, 2.0]), np.ones((2, 2)), atol=1e-15)


def test_zero_query_gives_uniform_mask():
    rng = np.random.default_rng(0)
    np.testing.assert_allclose(query_mask(rng.normal(size=(3, 4, 5)), np.zeros(5)), np.ones((3, 4)), atol=1e-15)


def test_dominant_location_concentrates_mask():
    f = np.zeros((2, 2, 1))
    f[1, 0, 0] = 5.0
    m = query_mask(f, [1.0])
    # softmax over raw scores (0, 0, 5, 0), scaled by H*W = 4
    e = np.exp([0.0, 0.0, 5.0, 0.0])
    np.testing.assert_allclose(m.ravel(), 4 * e / e.sum(), atol=1e-14)
    assert abs(m.sum() - 4.0) <= 1e-12
    assert m.argmax() == 2


def test_mask_dim_mismatch():
    with pytest.raises(ValueError):
        query_masks(np.zeros((2, 2, 3)), np.zeros((1, 2)))


@pytest.mark.parametrize("c, iou, gamma, expected", [
    (1.0, 1.0, 0.5, 1.0),
    (0.25, 1.0, 0.5, 0.5),
    (0.64, 0.25, 0.5, 0.4),
    (0.0, 0.3, 0.0, 0.3),  # 0**0 == 1
])
def test_quality_score(c, iou, gamma, expected):
    assert abs(quality_score(c, iou, gamma) - expected) <= 1e-12


def test_quality_score_monotone_and_geometric_mean():
    grid = np.linspace(0, 1, 21)
    q = quality_score(grid[:, None], grid[None, :])
    assert np.all(np.diff(q, axis=0) >= 0) and np.all(np.diff(q, axis=1) >= 0)
    np.testing.assert_allclose(q, np.sqrt(grid[:, None] * grid[None, :]), atol=1e-15)


def test_vanilla_examples():
    assert feat_kd_vanilla(np.full((1, 1, 1), 2.0), np.ones((1, 1, 1)), IDENTITY1, np.ones((1, 1))) == 1.0
    rng = np.random.default_rng(1)
    f_s = rng.normal(size=(3, 3, 2))
    phi = AdaptationLayer(rng.normal(size=(2, 4)), rng.normal(size=4))
    f_t = phi(f_s)
    assert feat_kd_vanilla(f_t, f_s, phi, rng.uniform(0, 2, (3, 3))) == 0.0
    f_t = f_t + rng.normal(size=f_t.shape)
    psi = rng.uniform(0, 2, (3, 3))
    assert abs(feat_kd_vanilla(f_t, f_s, phi, 2 * psi) - 4 * feat_kd_vanilla(f_t, f_s, phi, psi)) <= 1e-12


def test_target_aware_examples():
    rng = np.random.default_rng(2)
    f_t, f_s = rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 2, 3))
    phi = AdaptationLayer(rng.normal(size=(3, 4)), np.zeros(4))
    masks = query_masks(f_t, rng.normal(size=(5, 4)))
    assert feat_kd_target_aware(f_t, f_s, phi, masks, np.zeros(5)) == 0.0
    assert feat_kd_target_aware(phi(f_s), f_s, phi, masks, rng.uniform(size=5)) == 0.0
    one = feat_kd_target_aware(np.full((1, 1, 1), 3.0), np.zeros((1, 1, 1)), IDENTITY1, np.ones((1, 1, 1)), [1.0])
    assert one == 9.0


def test_target_aware_equals_explicit_sum():
    rng = np.random.default_rng(3)
    f_t, f_s = rng.normal(size=(4, 3, 5)), rng.normal(size=(4, 3, 2))
    phi = AdaptationLayer(rng.normal(size=(2, 5)), rng.normal(size=5))
    masks = query_masks(f_t, rng.normal(size=(3, 5)))
    q = rng.uniform(size=3)
    delta = f_t - phi(f_s)
    expected = sum(q[i] / (3 * 5 * 12) * np.sum((masks[i][..., None] * delta) ** 2) for i in range(3))
    assert abs(feat_kd_target_aware(f_t, f_s, phi, masks, q) - expected) <= 1e-12
    # with one query of quality 1 it reduces to the vanilla loss on that mask
    assert abs(feat_kd_target_aware(f_t, f_s, phi, masks[:1], [1.0]) - feat_kd_vanilla(f_t, f_s, phi, masks[0])) <= 1e-12


def test_shape_mismatches():
    phi = AdaptationLayer(np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        feat_kd_vanilla(np.zeros((2, 2, 3)), np.zeros((2, 3, 2)), phi, np.ones((2, 2)))
    with pytest.raises(ValueError):
        feat_kd_vanilla(np.zeros((2, 2, 4)), np.zeros((2, 2, 2)), phi, np.ones((2, 2)))
    with pytest.raises(ValueError):
        feat_kd_target_aware_grad(np.zeros((2, 2, 3)), np.zeros((2, 2, 2)), phi, np.ones((2, 2, 2)), [1.0])


def test_quality_weighted_mask():
    rng = np.random.default_rng(4)
    masks = query_masks(rng.normal(size=(3, 3, 2)), rng.normal(size=(2, 2)))
    assert not quality_weighted_mask(masks, [0, 0]).any()
    np.testing.assert_allclose(quality_weighted_mask(masks[:1], [0.7]), 0.7 * masks[0], atol=1e-15)
    np.testing.assert_allclose(quality_weighted_mask(masks, [0.5, 0.25]), 0.5 * masks[0] + 0.25 * masks[1], atol=1e-15)
    np.testing.assert_allclose(mean_mask(masks), (masks[0] + masks[1]) / 2, atol=1e-15)
