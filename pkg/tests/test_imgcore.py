import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nessst import imgcore
from nessst.imgcore import InvalidInput, bilinear_sample, convolve_separable, gaussian_kernel, gradients


def direct_conv2d(img, k2):
    """Brute-force 2-D correlation with clamped (edge-replicated) indices."""
    h, w = img.shape
    r = k2.shape[0] // 2
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy = min(max(y + dy, 0), h - 1)
                    xx = min(max(x + dx, 0), w - 1)
                    acc += k2[dy + r, dx + r] * img[yy, xx]
            out[y, x] = acc
    return out


class TestGaussianKernel:
    def test_single_tap(self):
        assert gaussian_kernel(1.0, 0).tolist() == [1.0]

    def test_sum_and_symmetry(self):
        k = gaussian_kernel(2.0, 4)
        assert len(k) == 9
        assert abs(k.sum() - 1.0) < 1e-6
        np.testing.assert_array_equal(k, k[::-1])

    def test_values_against_direct_evaluation(self):
        # normalized exp(-x^2 / 2) on x = -3..3
        k = gaussian_kernel(1.0, 3)
        assert k[3] == pytest.approx(0.3990502796524549, abs=1e-12)
        assert k[0] == pytest.approx(0.004433048175243745, abs=1e-12)

    @pytest.mark.parametrize("sigma", [0.0, -1.0])
    def test_rejects_nonpositive_sigma(self, sigma):
        with pytest.raises(InvalidInput):
            gaussian_kernel(sigma, 2)


class TestConvolveSeparable:
    def test_constant_preserved(self):
        img = np.full((9, 11), 0.37)
        out = convolve_separable(img, gaussian_kernel(1.5))
        np.testing.assert_allclose(out, 0.37, atol=1e-15)

    def test_identity_kernel(self, rng):
        img = rng.random((7, 5))
        np.testing.assert_array_equal(convolve_separable(img, np.array([1.0])), img)

    def test_impulse_matches_direct_2d(self):
        img = np.zeros((11, 11))
        img[5, 5] = 1.0
        k = gaussian_kernel(1.0, 3)
        out = convolve_separable(img, k)
        np.testing.assert_allclose(out, direct_conv2d(img, np.outer(k, k)), atol=1e-15)
        np.testing.assert_allclose(out[2:9, 2:9], np.outer(k, k), atol=1e-15)

    def test_random_matches_direct_2d_with_borders(self, rng):
        img = rng.random((8, 10))
        k = gaussian_kernel(1.2, 3)
        np.testing.assert_allclose(convolve_separable(img, k), direct_conv2d(img, np.outer(k, k)), atol=1e-12)

    def test_mean_preserved_on_interior_dominated_image(self, rng):
        img = np.zeros((64, 64))
        img[16:48, 16:48] = rng.random((32, 32))
        out = convolve_separable(img, gaussian_kernel(2.0))
        assert abs(out.mean() - img.mean()) < 1e-5

    def test_stack_equals_per_image(self, rng):
        stack = rng.random((3, 6, 7))
        k = gaussian_kernel(1.0)
        out = convolve_separable(stack, k)
        for i in range(3):
            np.testing.assert_allclose(out[i], convolve_separable(stack[i], k), atol=1e-15)


class TestGradients:
    def test_constant(self):
        ix, iy = gradients(np.full((5, 6), 0.2))
        assert not ix.any() and not iy.any()

    def test_unit_ramp(self):
        x = np.tile(np.arange(8.0), (6, 1))
        ix, iy = gradients(x)
        np.testing.assert_allclose(ix[1:-1, 1:-1], 1.0, atol=1e-15)
        np.testing.assert_allclose(iy, 0.0, atol=1e-15)

    @pytest.mark.parametrize("a,b", [(0.5, -2.0), (3.0, 0.25), (-1.0, 1.0)])
    def test_linear_ramp_exact(self, a, b):
        y, x = np.mgrid[0:7, 0:9].astype(float)
        ix, iy = gradients(a * x + b * y)
        np.testing.assert_allclose(ix[1:-1, 1:-1], a, atol=1e-12)
        np.testing.assert_allclose(iy[1:-1, 1:-1], b, atol=1e-12)

    def test_random_matches_naive_sobel(self, rng):
        img = rng.random((8, 8))
        sx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]) / 8.0
        ix, iy = gradients(img)
        np.testing.assert_allclose(ix, direct_conv2d(img, sx), atol=1e-14)
        np.testing.assert_allclose(iy, direct_conv2d(img, sx.T), atol=1e-14)

    def test_too_small(self):
        with pytest.raises(InvalidInput):
            gradients(np.zeros((2, 5)))


class TestBilinear:
    def test_integer_coordinates_exact(self, rng):
        img = rng.random((5, 6))
        for y in range(5):
            for x in range(6):
                assert bilinear_sample(img, x, y) == img[y, x]

    def test_midpoint(self):
        img = np.array([[0.0, 1.0], [0.0, 1.0]])
        assert bilinear_sample(img, 0.5, 0.0) == pytest.approx(0.5)

    def test_clamped(self, rng):
        img = rng.random((4, 4))
        assert bilinear_sample(img, -5, -5) == img[0, 0]
        assert bilinear_sample(img, 10, 2) == img[2, 3]

    @settings(max_examples=100, deadline=None)
    @given(x=st.floats(0, 6), y=st.floats(0, 4), d=st.floats(0, 0.99))
    def test_lipschitz(self, x, y, d):
        img = np.random.default_rng(0).random((5, 7))
        bound = max(np.abs(np.diff(img, axis=1)).max(), np.abs(np.diff(img, axis=0)).max())
        a = bilinear_sample(img, x, y)
        b = bilinear_sample(img, x + d, y)
        assert abs(a - b) <= d * bound + 1e-12


class TestIO:
    def test_pgm_roundtrip(self, tmp_path, rng):
        img = np.round(rng.random((6, 9)) * 255) / 255
        path = tmp_path / "a.pgm"
        imgcore.save_pgm(img, path)
        np.testing.assert_allclose(imgcore.load_image(path), img, atol=1e-12)

    def test_png_color_luma(self, tmp_path):
        from PIL import Image

        rgb = np.zeros((2, 2, 3), dtype=np.uint8)
        rgb[0, 0] = (255, 0, 0)
        rgb[0, 1] = (0, 255, 0)
        rgb[1, 0] = (0, 0, 255)
        rgb[1, 1] = (100, 150, 200)
        Image.fromarray(rgb, "RGB").save(tmp_path / "c.png")
        out = imgcore.load_image(tmp_path / "c.png")
        expect = np.array([[0.299, 0.587], [0.114, (0.299 * 100 + 0.587 * 150 + 0.114 * 200) / 255]])
        np.testing.assert_allclose(out, expect, atol=1e-12)

    def test_normalized_export(self, tmp_path):
        imgcore.save_pgm(np.array([[2.0, 4.0], [3.0, 4.0]]), tmp_path / "s.pgm", normalize=True)
        np.testing.assert_allclose(imgcore.load_image(tmp_path / "s.pgm"), [[0, 1], [128 / 255, 1]])
