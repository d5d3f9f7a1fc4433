import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from apps.adaptation.exceptions import DimensionMismatchError, PreconditionError
from apps.adaptation.preprocess import (
    MINMAX, ZSCORE, SliceStack, denormalize, keys_kernel, normalize, reassemble, resize_bicubic,
    resize_stack, slice_z,
)
from apps.adaptation.volumes import Volume3D


def dense_oracle(img, out_h, out_w):
    """Прямая свёртка: для каждого выходного пикселя 4×4 отсчёта с прижатыми индексами"""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    out = np.zeros((out_h, out_w))
    for u in range(out_h):
        y = (u + 0.5) * h / out_h - 0.5
        for v in range(out_w):
            x = (v + 0.5) * w / out_w - 0.5
            total = 0.0
            for i in range(int(np.floor(y)) - 1, int(np.floor(y)) + 3):
                wy = float(keys_kernel(np.array(y - i)))
                for j in range(int(np.floor(x)) - 1, int(np.floor(x)) + 3):
                    wx = float(keys_kernel(np.array(x - j)))
                    total += wy * wx * img[min(max(i, 0), h - 1), min(max(j, 0), w - 1)]
            out[u, v] = total
    return out


class ResizeBicubicTests(SimpleTestCase):
    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(0)
        sizes = [(8, 8, 16, 16), (16, 12, 8, 6), (7, 9, 7, 9), (5, 5, 13, 3), (12, 4, 12, 10)]
        for index in range(50):
            h, w, out_h, out_w = sizes[index % len(sizes)]
            img = rng.normal(size=(h, w))
            assert_allclose(resize_bicubic(img, out_h, out_w), dense_oracle(img, out_h, out_w), atol=1e-6)

    def test_constant_image(self):
        for out in [(3, 5), (20, 20), (64, 32)]:
            assert_allclose(resize_bicubic(np.full((10, 10), 3.25), *out), 3.25, atol=1e-6)

    def test_identity_size(self):
        img = np.random.default_rng(1).random((9, 7))
        assert_allclose(resize_bicubic(img, 9, 7), img, atol=1e-6)

    def test_linear_ramp_interior(self):
        ramp = np.tile(np.arange(8, dtype=np.float64)[:, None], (1, 8))
        up = resize_bicubic(ramp, 16, 16)
        expected = (np.arange(16) + 0.5) / 2 - 0.5
        # края искажены прижатием индексов
        assert_allclose(up[4:12, :], np.tile(expected[4:12, None], (1, 16)), atol=1e-6)

    def test_stack_matches_single(self):
        images = np.random.default_rng(2).random((3, 10, 6))
        stacked = resize_stack(images, 5, 12)
        for i in range(3):
            assert_allclose(stacked[i], resize_bicubic(images[i], 5, 12), atol=1e-12)

    def test_invalid_size(self):
        with self.assertRaises(PreconditionError):
            resize_bicubic(np.zeros((4, 4)), 0, 4)


class SliceTests(SimpleTestCase):
    def test_slice_order(self):
        vol = Volume3D(np.arange(48, dtype=np.float32).reshape(4, 4, 3))
        stack = slice_z(vol)
        self.assertEqual(len(stack), 3)
        for k in range(3):
            self.assertTrue(np.array_equal(stack.slices[k], vol.voxels[:, :, k]))

    def test_single_slice(self):
        vol = Volume3D(np.random.default_rng(0).random((4, 4, 1)))
        stack = slice_z(vol)
        self.assertEqual(len(stack), 1)
        self.assertTrue(np.array_equal(stack.slices[0], vol.voxels[:, :, 0]))

    def test_round_trip(self):
        vol = Volume3D(np.random.default_rng(3).random((5, 6, 4)), (0.5, 0.5, 2.0), (1.0, 2.0, 3.0))
        self.assertEqual(reassemble(slice_z(vol), vol.shape, vol.spacing, vol.origin), vol)

    def test_reassemble_resizes(self):
        rng = np.random.default_rng(4)
        slices = [rng.random((32, 32)) for _ in range(3)]
        stack = SliceStack(slices, (32, 32, 3), (1.0, 1.0, 1.0))
        vol = reassemble(stack, (64, 64, 3), (1.0, 1.0, 1.0))
        self.assertEqual(vol.shape, (64, 64, 3))
        for k in range(3):
            assert_allclose(vol.voxels[:, :, k], resize_bicubic(slices[k], 64, 64), atol=1e-6)

    def test_reassemble_slice_count_mismatch(self):
        stack = SliceStack([np.zeros((4, 4))] * 2, (4, 4, 2), (1.0, 1.0, 1.0))
        with self.assertRaises(DimensionMismatchError):
            reassemble(stack, (4, 4, 3), (1.0, 1.0, 1.0))

    def test_stack_length_checked(self):
        with self.assertRaises(DimensionMismatchError):
            SliceStack([np.zeros((4, 4))], (4, 4, 2), (1.0, 1.0, 1.0))


class NormalizeTests(SimpleTestCase):
    def test_minmax_endpoints(self):
        vol = Volume3D(np.array([2.0, 3.0, 4.0, 6.0]).reshape(1, 2, 2))
        normed, params = normalize(vol, MINMAX)
        self.assertEqual(normed.voxels.min(), -1.0)
        self.assertEqual(normed.voxels.max(), 1.0)
        self.assertEqual((params.first, params.second), (2.0, 6.0))

    def test_constant_volume(self):
        vol = Volume3D(np.full((2, 2, 2), 4.5))
        for mode in (MINMAX, ZSCORE):
            normed, params = normalize(vol, mode)
            self.assertTrue(params.degenerate)
            self.assertTrue(np.all(normed.voxels == 0))
            assert_allclose(denormalize(normed, params).voxels, 4.5)

    def test_zscore_statistics(self):
        vol = Volume3D(np.random.default_rng(5).normal(3.0, 2.0, size=(6, 6, 6)))
        normed, _ = normalize(vol, ZSCORE)
        self.assertAlmostEqual(float(normed.voxels.mean()), 0.0, places=5)
        self.assertAlmostEqual(float(normed.voxels.std()), 1.0, places=5)

    def test_round_trip(self):
        vol = Volume3D(np.random.default_rng(6).random((4, 5, 6)) * 100)
        for mode in (MINMAX, ZSCORE):
            normed, params = normalize(vol, mode)
            assert_allclose(denormalize(normed, params).voxels, vol.voxels, atol=1e-6 * 100)

    def test_unknown_mode(self):
        with self.assertRaises(PreconditionError):
            normalize(Volume3D(np.zeros((1, 1, 1))), 'robust')
