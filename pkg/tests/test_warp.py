import unittest

import numpy as np

from neureg.errors import InvalidInputError, ShapeMismatchError
from neureg.fourierdecoder import DeformationField
from neureg.lossmetrics import dice
from neureg.tensorautodiff import Tensor, grad_check
from neureg.volume import LabelVolume, Volume3
from neureg.warp import *


def uniform_field(dims, dx=0.0, dy=0.0, dz=0.0):
    data = np.zeros((3,) + tuple(dims))
    data[0], data[1], data[2] = dx, dy, dz
    return DeformationField(data)


class TestWarpTrilinear(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(11)
        self.moving = Volume3(self.rng.normal(size=(5, 6, 7)))

    def test_zero_field_is_bitwise_identity(self):
        out = warp_trilinear(self.moving, DeformationField.zeros(self.moving.dims))
        self.assertEqual(out.data.tobytes(), self.moving.data.tobytes())

    def test_integer_translation(self):
        ramp = Volume3.from_array(np.indices((5, 5, 5)).sum(axis=0) + 10.0 * np.arange(5)[:, None, None])
        out = warp_trilinear(ramp, uniform_field((5, 5, 5), dx=1.0))
        self.assertTrue(np.allclose(out.data[:4], ramp.data[1:]))
        self.assertTrue(np.allclose(out.data[4], ramp.data[4]))

    def test_constant_volume_stays_constant(self):
        moving = Volume3(np.full((4, 5, 6), 2.5))
        field = DeformationField(self.rng.normal(scale=3.0, size=(3, 4, 5, 6)))
        self.assertTrue(np.allclose(warp_trilinear(moving, field).data, 2.5))

    def test_linear_in_moving(self):
        field = DeformationField(self.rng.normal(size=(3,) + self.moving.dims))
        other = Volume3(self.rng.normal(size=self.moving.dims))
        combined = Volume3(2.0 * self.moving.data - 0.5 * other.data)
        lhs = warp_trilinear(combined, field).data
        rhs = 2.0 * warp_trilinear(self.moving, field).data - 0.5 * warp_trilinear(other, field).data
        self.assertLess(np.abs(lhs - rhs).max(), 1e-12)

    def test_half_voxel_interpolates(self):
        moving = Volume3(np.arange(4.0).reshape(4, 1, 1) * np.ones((4, 2, 2)))
        out = warp_trilinear(moving, uniform_field(moving.dims, dx=0.5))
        self.assertTrue(np.allclose(out.data[:3, 0, 0], [0.5, 1.5, 2.5]))

    def test_dims_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            warp_trilinear(self.moving, DeformationField.zeros((5, 6, 6)))


class TestWarpGradients(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(4)
        self.dims = (4, 5, 3)
        self.moving = Tensor.parameter(rng.normal(size=self.dims), "moving")
        # fractional offsets keep samples away from cell boundaries
        self.field = Tensor.parameter(0.2 + 0.6 * rng.uniform(size=(3,) + self.dims), "field")
        self.weights = rng.normal(size=self.dims)

    def test_gradient_wrt_field(self):
        report = grad_check(lambda: (warp_tensor(self.moving, self.field) * self.weights).sum(), [self.field])
        self.assertTrue(report.passed, msg=str(report.failures[:3]))

    def test_gradient_wrt_moving(self):
        report = grad_check(lambda: (warp_tensor(self.moving, self.field) * self.weights).sum(), [self.moving])
        self.assertTrue(report.passed, msg=str(report.failures[:3]))

    def test_tensor_matches_volume_warp(self):
        out = warp_tensor(self.moving.data, self.field.data).data
        expected = warp_trilinear(Volume3(self.moving.data), DeformationField(self.field.data)).data
        self.assertTrue(np.array_equal(out, expected))

    def test_bad_field_shape(self):
        with self.assertRaises(InvalidInputError):
            warp_tensor(np.zeros((2, 2, 2)), np.zeros((2, 2, 2, 2)))


class TestWarpLabels(unittest.TestCase):
    def setUp(self):
        data = np.zeros((3, 3, 3), dtype=np.uint16)
        data[1:, :, :] = 2
        data[0, 0, 0] = 5
        self.labels = LabelVolume(data)

    def test_zero_field(self):
        out = warp_labels(self.labels, DeformationField.zeros((3, 3, 3)))
        self.assertTrue(np.array_equal(out.data, self.labels.data))

    def test_half_voxel_ties_go_low(self):
        out = warp_labels(self.labels, uniform_field((3, 3, 3), dx=0.5))
        self.assertTrue(np.array_equal(out.data, self.labels.data))
        out = warp_labels(self.labels, uniform_field((3, 3, 3), dx=-0.5))
        expected = self.labels.data[[0, 0, 1]]
        self.assertTrue(np.array_equal(out.data, expected))

    def test_past_half_rounds_up(self):
        out = warp_labels(self.labels, uniform_field((3, 3, 3), dx=0.6))
        self.assertTrue(np.array_equal(out.data, self.labels.data[[1, 2, 2]]))

    def test_never_invents_labels(self):
        field = DeformationField(np.random.default_rng(2).normal(scale=1.5, size=(3, 3, 3, 3)))
        out = warp_labels(self.labels, field)
        self.assertTrue(set(out.label_set) <= set(self.labels.label_set))

    def test_moving_region_lowers_dice(self):
        data = np.zeros((6, 6, 6), dtype=np.uint16)
        data[2:4, 2:4, 2:4] = 1
        labels = LabelVolume(data)
        shifted = warp_labels(labels, uniform_field((6, 6, 6), dx=1.0))
        self.assertLess(dice(shifted, labels).mean, 1.0)


class TestJacobian(unittest.TestCase):
    def test_zero_field(self):
        stats = jacobian_stats(DeformationField.zeros((4, 4, 4)))
        self.assertAlmostEqual(stats.min_det, 1.0)
        self.assertEqual(stats.nonpos_fraction, 0.0)

    def test_uniform_scaling(self):
        field = DeformationField(0.1 * np.indices((5, 6, 7), dtype=np.float64))
        det = jacobian_determinant(field)
        self.assertTrue(np.allclose(det, 1.1**3))

    def test_folding(self):
        data = np.zeros((3, 5, 5, 5))
        data[0] = -2.0 * np.indices((5, 5, 5))[0]
        stats = jacobian_stats(DeformationField(data))
        self.assertGreater(stats.nonpos_fraction, 0.0)
        self.assertLess(stats.min_det, 0.0)

    def test_needs_two_voxels(self):
        with self.assertRaises(InvalidInputError):
            jacobian_stats(DeformationField.zeros((1, 4, 4)))


if __name__ == "__main__":
    unittest.main()
