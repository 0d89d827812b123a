import math

import numpy as np
import pytest

from rtn.geometry import (AffineField, add_residual, flow_of, identity_field, transform_offset,
                          upsample_field, warp_image, zero_field)
from rtn.tensor import ShapeError, Tensor


def field_from(params):
    return AffineField(Tensor(np.asarray(params, dtype=float)))


def test_identity_field_params():
    f = identity_field(4, 4)
    assert f.shape == (4, 4)
    assert np.array_equal(f.numpy(), np.tile([1, 0, 0, 1, 0, 0], (4, 4, 1)))


def test_identity_has_zero_flow():
    assert np.all(flow_of(identity_field(8, 8)).data == 0.0)


@pytest.mark.parametrize("i", [(0, 0), (3, 1), (2, 5)])
def test_transform_offset_identity(i):
    f = identity_field(6, 6)
    np.testing.assert_array_equal(transform_offset(f, i, (1, 0)), [i[0] + 1, i[1]])
    np.testing.assert_array_equal(transform_offset(f, i, (0.25, -2)), [i[0] + 0.25, i[1] - 2])


def test_transform_offset_scale():
    p = np.tile([2.0, 0, 0, 2.0, 0, 0], (3, 3, 1))
    np.testing.assert_array_equal(transform_offset(field_from(p), (1, 2), (1, 1)), [3, 4])


def test_transform_offset_rotation():
    c, s = math.cos(math.pi / 2), math.sin(math.pi / 2)
    p = np.tile([c, -s, s, c, 3.0, 0.0], (3, 3, 1))
    # rotation by 90 degrees sends (1, 0) to (0, 1); hand-computed: i + (3, 0) + (0, 1)
    np.testing.assert_allclose(transform_offset(field_from(p), (1, 1), (1, 0)), [4, 2], atol=1e-15)


def test_transform_offset_zero_delta_is_correspondence():
    rng = np.random.default_rng(0)
    f = field_from(rng.normal(size=(4, 5, 6)))
    for y in range(4):
        for x in range(5):
            np.testing.assert_array_equal(transform_offset(f, (x, y)), [x, y] + f.numpy()[y, x, 4:])


def test_add_zero_residual_is_neutral():
    base = field_from(np.random.default_rng(1).normal(size=(3, 4, 6)))
    assert np.array_equal(add_residual(base, zero_field(3, 4)).numpy(), base.numpy())


def test_add_translation_residual():
    res = np.zeros((4, 4, 6))
    res[..., 4:] = (1.0, 2.0)
    out = add_residual(identity_field(4, 4), field_from(res))
    assert np.all(flow_of(out).data == np.array([1.0, 2.0]))
    assert np.all(out.linear() == np.eye(2))


def test_residual_sequence_equals_summed_residual():
    # integer-valued residuals: float addition is then exact and order-independent
    rng = np.random.default_rng(2)
    res = [rng.integers(-50, 50, size=(5, 5, 6)).astype(float) for _ in range(6)]
    seq = identity_field(5, 5)
    for r in res:
        seq = add_residual(seq, field_from(r))
    once = add_residual(identity_field(5, 5), field_from(sum(res)))
    assert np.array_equal(seq.numpy(), once.numpy())


def test_add_residual_dim_mismatch():
    with pytest.raises(ShapeError):
        add_residual(identity_field(3, 3), identity_field(3, 4))


def test_bad_field_shape():
    with pytest.raises(ShapeError):
        AffineField(Tensor(np.zeros((3, 3, 5))))


class TestWarp:
    def test_zero_flow_identity(self):
        img = np.random.default_rng(0).random((9, 11, 3))
        assert np.array_equal(warp_image(img, np.zeros((9, 11, 2))), img)

    def test_uniform_shift_recovers_alignment(self):
        rng = np.random.default_rng(1)
        base = rng.random((20, 30, 3))
        target = np.zeros_like(base)
        target[:, :-5] = base[:, 5:]          # target(x) = base(x + 5)
        out = warp_image(base, np.tile([5.0, 0.0], (20, 30, 1)))
        assert np.array_equal(out[:, :-5], target[:, :-5])

    def test_flow_grid_mismatch(self):
        with pytest.raises(ShapeError):
            warp_image(np.zeros((4, 4, 3)), np.zeros((2, 2, 2)))


class TestUpsample:
    def test_identity_stays_identity(self):
        out = upsample_field(identity_field(4, 5), 16, 20)
        assert np.array_equal(out.numpy(), identity_field(16, 20).numpy())

    def test_translation_scaled_by_ratio(self):
        p = np.tile([1.0, 0, 0, 1.0, 1.0, 0.0], (4, 4, 1))
        out = upsample_field(field_from(p), 16, 16)
        np.testing.assert_array_equal(out.numpy()[..., 4:], np.tile([4.0, 0.0], (16, 16, 1)))

    def test_round_trip_linear_ramp(self):
        ys, xs = np.mgrid[0:6, 0:7].astype(float)
        p = np.stack([1 + 0.1 * xs, 0.05 * ys, -0.02 * xs, 1 - 0.03 * ys, 0.5 * xs - 0.2 * ys, 0.3 * ys], -1)
        up = upsample_field(field_from(p), 24, 28)
        back = upsample_field(up, 6, 7)
        np.testing.assert_allclose(back.numpy()[1:-1, 1:-1], p[1:-1, 1:-1], atol=1e-10, rtol=0)

    def test_anisotropic_conjugation(self):
        p = np.tile([1.0, 0.5, 0.2, 1.0, 1.0, 1.0], (2, 2, 1))
        out = upsample_field(field_from(p), 4, 8).numpy()[0, 0]
        # S A S^-1 with S = diag(4, 2)
        np.testing.assert_allclose(out, [1.0, 1.0, 0.1, 1.0, 4.0, 2.0])
