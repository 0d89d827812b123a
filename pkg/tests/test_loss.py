import math

import numpy as np
import pytest

from rtn.features import FeatureNetParams, extract, extract_transformed, penultimate, transform_features
from rtn.geometry import AffineField, identity_field
from rtn.loss import LossConfig, classification_loss, match_probability, sample_pixels, valid_pixels
from rtn.matching import WindowSpec
from rtn.tensor import Tensor, grad_check


def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def fixed(t):
    return lambda field: t


def test_constant_similarities_uniform_probability():
    d = Tensor(unit(np.ones((9, 9, 4))))
    p = match_probability(d, fixed(d), identity_field(9, 9), (4, 4), WindowSpec(2, 1)).data
    np.testing.assert_allclose(p, 1 / 25, atol=1e-15)


def test_centre_one_others_minus_one():
    src = np.zeros((9, 9, 2))
    src[..., 0] = 1.0
    tgt = -src.copy()
    tgt[4, 4] = (1.0, 0.0)
    p = match_probability(Tensor(src), fixed(Tensor(tgt)), identity_field(9, 9), (4, 4), WindowSpec(2, 1)).data
    expected = math.e / (math.e + 24 * math.exp(-1))
    assert abs(p[12] - expected) < 1e-12
    assert abs(p[12] - 0.2354) < 1e-4


def test_probabilities_sum_to_one():
    rng = np.random.default_rng(0)
    for _ in range(20):
        src, tgt = Tensor(unit(rng.normal(size=(8, 8, 5)))), Tensor(unit(rng.normal(size=(8, 8, 5))))
        i = tuple(rng.integers(2, 6, size=2))
        p = match_probability(src, fixed(tgt), identity_field(8, 8), i, WindowSpec(2, 1)).data
        assert abs(p.sum() - 1.0) < 1e-9 and np.all(p >= 0)


def test_uniform_loss_is_log_window_size():
    d = Tensor(unit(np.ones((10, 10, 3))))
    cfg = LossConfig(samples=None)
    loss = classification_loss(d, fixed(d), identity_field(10, 10), cfg, valid_pixels(10, 10, 2)).item()
    assert abs(loss - math.log(25)) < 1e-9


def test_perfect_classification_limit():
    # unit descriptors cap the centre margin at 2; scaling the source descriptor
    # stands in for sharper logits and drives the loss towards zero
    src = np.zeros((9, 9, 2))
    src[..., 0] = 1.0
    tgt = -src.copy()
    tgt[4, 4] = (1.0, 0.0)
    loss = classification_loss(Tensor(src), fixed(Tensor(tgt)), identity_field(9, 9), LossConfig(), [40]).item()
    assert abs(loss + math.log(math.e / (math.e + 24 * math.exp(-1)))) < 1e-12
    scaled = [classification_loss(Tensor(src * s), fixed(Tensor(tgt)), identity_field(9, 9), LossConfig(),
                                  [40]).item() for s in (1, 3, 6, 12)]
    assert all(a > b for a, b in zip(scaled, scaled[1:])) and scaled[-1] < 1e-8


def test_raising_centre_similarity_lowers_loss():
    rng = np.random.default_rng(1)
    win = WindowSpec(2, 1)
    for _ in range(100):
        src = unit(rng.normal(size=(5, 5, 6)))
        tgt = unit(rng.normal(size=(5, 5, 6)))
        before = classification_loss(Tensor(src), fixed(Tensor(tgt)), identity_field(5, 5), LossConfig(), [12]).item()
        # move the centre target descriptor towards the source descriptor; others untouched
        t2 = tgt.copy()
        t2[2, 2] = unit(tgt[2, 2] + rng.uniform(0.2, 2.0) * src[2, 2])
        after = classification_loss(Tensor(src), fixed(Tensor(t2)), identity_field(5, 5), LossConfig(), [12]).item()
        assert win.size == 25 and after < before


def test_field_gradient_finite_differences():
    rng = np.random.default_rng(2)
    feat = FeatureNetParams.init(rng)
    img_s, img_t = rng.random((32, 32, 3)), rng.random((32, 32, 3))
    src = extract(img_s, feat)
    pen = penultimate(img_t, feat)
    p = Tensor(identity_field(8, 8).numpy() + rng.normal(0, 0.3, (8, 8, 6)))
    cfg = LossConfig(samples=None)
    pix = valid_pixels(8, 8, 2)

    def f(p):
        return classification_loss(src, lambda fld: transform_features(pen, fld, feat), AffineField(p), cfg, pix)

    assert grad_check(f, [p]) < 1e-4


def test_gradient_flows_through_both_roles():
    rng = np.random.default_rng(3)
    feat = FeatureNetParams.init(rng, channels=(3, 4, 4, 4), dim=4)
    img_s, img_t = rng.random((32, 32, 3)), rng.random((32, 32, 3))
    field = AffineField(Tensor(identity_field(8, 8).numpy() + rng.normal(0, 0.2, (8, 8, 6)), requires_grad=True))
    loss = classification_loss(extract(img_s, feat), lambda f: extract_transformed(img_t, f, feat), field,
                               LossConfig(samples=None), valid_pixels(8, 8, 2))
    loss.backward()
    assert np.abs(field.params.grad).max() > 0
    assert all(np.abs(k.grad).max() > 0 for k in feat.kernels)


def test_empty_pixels_rejected():
    d = Tensor(unit(np.ones((6, 6, 2))))
    with pytest.raises(ValueError):
        classification_loss(d, fixed(d), identity_field(6, 6), LossConfig(), [])


class TestSampling:
    def test_valid_pixels_interior(self):
        pix = valid_pixels(8, 10, 2)
        ys, xs = np.divmod(pix, 10)
        assert pix.size == 4 * 6 and ys.min() == 2 and ys.max() == 5 and xs.min() == 2 and xs.max() == 7

    def test_sample_is_subset_without_repeats(self):
        pix = sample_pixels(16, 16, 2, 50, np.random.default_rng(0))
        assert pix.size == 50 and np.unique(pix).size == 50
        assert set(pix) <= set(valid_pixels(16, 16, 2))

    def test_large_count_falls_back_to_all(self):
        assert np.array_equal(sample_pixels(8, 8, 2, 256), valid_pixels(8, 8, 2))

    def test_reproducible(self):
        a = sample_pixels(16, 16, 2, 30, np.random.default_rng(5))
        b = sample_pixels(16, 16, 2, 30, np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_grid_too_small(self):
        with pytest.raises(ValueError):
            sample_pixels(4, 4, 2, 10)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            LossConfig(samples=0)
        with pytest.raises(ValueError):
            LossConfig(radius=-1)
