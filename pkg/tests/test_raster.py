import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aeroheight.raster import (
    SOBEL_X,
    SOBEL_Y,
    LabelGrid,
    NormalEncoding,
    RasterGrid,
    downsample,
    gaussian_window,
    sobel,
    stitch,
    surface_normals,
    window_origins,
)


def grid1(arr, gsd=1.0):
    return RasterGrid(np.asarray(arr, dtype=np.float32), gsd)


def brute_correlate(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Scalar-loop correlation with replicate padding; oracle for sobel."""
    h, w = plane.shape
    padded = np.pad(plane.astype(np.float64), 1, mode="edge")
    out = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            acc = 0.0
            for i in range(3):
                for j in range(3):
                    acc += kernel[i, j] * padded[r + i, c + j]
            out[r, c] = acc
    return out


class TestSobel:
    def test_constant_grid_is_zero(self):
        g = grid1(np.full((8, 8), 4.25))
        for axis in (0, 1):
            assert np.all(sobel(g, axis).data == 0.0)

    def test_column_ramp_axis0_interior_is_eight(self):
        # hand-applied horizontal kernel on a unit ramp sums to 2 + 4 + 2
        h = np.tile(np.arange(10, dtype=np.float32), (10, 1))
        out = sobel(grid1(h), 0).data[:, :, 0]
        assert np.allclose(out[1:-1, 1:-1], 8.0)

    def test_column_ramp_axis1_is_zero(self):
        h = np.tile(np.arange(10, dtype=np.float32), (10, 1))
        out = sobel(grid1(h), 1).data
        assert np.allclose(out, 0.0)

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(3)
        plane = rng.uniform(-2, 2, size=(9, 12)).astype(np.float32)
        for axis, kernel in ((0, SOBEL_X), (1, SOBEL_Y)):
            got = sobel(grid1(plane), axis).data[:, :, 0]
            want = brute_correlate(plane, kernel)
            assert np.allclose(got, want, atol=1e-5)

    def test_rejects_multichannel(self):
        g = RasterGrid(np.zeros((4, 4, 3), dtype=np.float32), 1.0)
        with pytest.raises(ValueError, match="single-channel"):
            sobel(g, 0)

    def test_rejects_bad_axis(self):
        with pytest.raises(ValueError):
            sobel(grid1(np.zeros((4, 4))), 2)

    @given(
        alpha=st.floats(-3, 3, allow_nan=False),
        beta=st.floats(-3, 3, allow_nan=False),
        seed=st.integers(0, 10_000),
    )
    @settings(max_examples=25, deadline=None)
    def test_linearity(self, alpha, beta, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(-1, 1, size=(7, 7))
        b = rng.uniform(-1, 1, size=(7, 7))
        lhs = sobel(grid1(alpha * a + beta * b), 0).data
        rhs = alpha * sobel(grid1(a), 0).data + beta * sobel(grid1(b), 0).data
        assert np.allclose(lhs, rhs, atol=1e-5)


class TestNormalEncoding:
    def test_literal_range(self):
        n = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0]])
        enc = NormalEncoding.HALF_PLUS_ONE.encode(n)
        assert enc.min() >= 0.5 - 1e-9 and enc.max() <= 1.5 + 1e-9

    def test_unit_interval_range(self):
        n = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0]])
        enc = NormalEncoding.UNIT_INTERVAL.encode(n)
        assert enc.min() >= -1e-9 and enc.max() <= 1.0 + 1e-9

    @given(
        theta=st.floats(0, math.pi, allow_nan=False),
        phi=st.floats(0, 2 * math.pi, allow_nan=False),
    )
    @settings(max_examples=50, deadline=None)
    def test_decode_encode_roundtrip(self, theta, phi):
        n = np.array(
            [math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)]
        )
        for enc in NormalEncoding:
            back = enc.decode(enc.encode(n))
            assert np.allclose(back, n, atol=1e-5)


class TestSurfaceNormals:
    def test_flat_literal(self):
        g = grid1(np.zeros((6, 6)))
        out = surface_normals(g, NormalEncoding.HALF_PLUS_ONE)
        assert np.allclose(out.data, [1.0, 1.0, 1.5], atol=1e-6)
        assert out.normal_encoding is NormalEncoding.HALF_PLUS_ONE

    def test_flat_unit_interval(self):
        g = grid1(np.full((6, 6), 3.0))
        out = surface_normals(g, NormalEncoding.UNIT_INTERVAL)
        assert np.allclose(out.data, [0.5, 0.5, 1.0], atol=1e-6)

    def test_ramp_interior_decoded(self):
        h = np.tile(np.arange(12, dtype=np.float32), (12, 1))
        out = surface_normals(grid1(h))
        decoded = out.normal_encoding.decode(out.data)
        expected = np.array([-8.0, 0.0, 1.0]) / math.sqrt(65.0)
        assert np.allclose(decoded[2:-2, 2:-2], expected, atol=1e-6)

    def test_metric_gradients_divide_by_8_gsd(self):
        h = np.tile(np.arange(12, dtype=np.float32), (12, 1))
        out = surface_normals(grid1(h, gsd=0.5), NormalEncoding.HALF_PLUS_ONE, metric=True)
        decoded = out.normal_encoding.decode(out.data.astype(np.float64))
        # slope of 1 unit per 0.5 m pixel -> metric gradient 2
        expected = np.array([-2.0, 0.0, 1.0]) / math.sqrt(5.0)
        assert np.allclose(decoded[2:-2, 2:-2], expected, atol=1e-6)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_unit_norm_and_up_facing(self, seed):
        rng = np.random.default_rng(seed)
        h = rng.uniform(0, 30, size=(9, 9))
        for enc in NormalEncoding:
            out = surface_normals(grid1(h), enc)
            decoded = enc.decode(out.data.astype(np.float64))
            norms = np.linalg.norm(decoded, axis=-1)
            assert np.allclose(norms, 1.0, atol=1e-5)
            assert (decoded[:, :, 2] > 0).all()


class TestDownsample:
    def test_factor_one_identity(self):
        g = grid1(np.random.default_rng(0).uniform(size=(6, 6)))
        out = downsample(g, 1)
        assert np.array_equal(out.data, g.data)
        assert out.gsd_m == g.gsd_m

    def test_constant_average(self):
        g = grid1(np.full((4, 4), 7.0))
        out = downsample(g, 2)
        assert out.shape_px == (2, 2)
        assert np.all(out.data == 7.0)

    def test_shape_and_gsd_scaling(self):
        g = grid1(np.zeros((320, 320)), gsd=0.5)
        out = downsample(g, 10)
        assert out.shape_px == (32, 32)
        assert out.gsd_m == pytest.approx(5.0)

    def test_known_block_means(self):
        g = grid1([[0.0, 2.0], [4.0, 6.0]])
        out = downsample(g, 2)
        assert out.data[0, 0, 0] == pytest.approx(3.0)

    def test_nondivisible_pads_by_replication(self):
        g = grid1([[1.0, 1.0, 5.0], [1.0, 1.0, 5.0], [3.0, 3.0, 7.0]])
        out = downsample(g, 2)
        assert out.shape_px == (2, 2)
        assert out.data[0, 0, 0] == pytest.approx(1.0)
        assert out.data[0, 1, 0] == pytest.approx(5.0)  # replicated right edge
        assert out.data[1, 1, 0] == pytest.approx(7.0)

    def test_rejects_bad_factor(self):
        g = grid1(np.zeros((4, 4)))
        with pytest.raises(ValueError):
            downsample(g, 0)

    @given(
        a=st.integers(2, 3),
        b=st.integers(2, 3),
        seed=st.integers(0, 10_000),
    )
    @settings(max_examples=25, deadline=None)
    def test_composition(self, a, b, seed):
        rng = np.random.default_rng(seed)
        n = a * b * 4
        g = grid1(rng.uniform(0, 1, size=(n, n)))
        once = downsample(g, a * b)
        twice = downsample(downsample(g, a), b)
        assert np.allclose(once.data, twice.data, atol=1e-6)
        assert once.gsd_m == pytest.approx(twice.gsd_m)


class TestGaussianWindow:
    def test_size3_center_and_symmetry(self):
        w = gaussian_window(3, 1.7).data[:, :, 0]
        assert w[1, 1] == pytest.approx(1.0)
        assert w[0, 0] == w[0, 2] == w[2, 0] == w[2, 2]
        assert w[0, 1] == w[1, 0] == w[1, 2] == w[2, 1]

    def test_size1_degenerate(self):
        w = gaussian_window(1, 2.0).data
        assert w.shape == (1, 1, 1)
        assert w[0, 0, 0] == pytest.approx(1.0)

    def test_size320_corner_closed_form(self):
        w = gaussian_window(320, 80.0).data[:, :, 0]
        expected = math.exp(-(159.5**2 + 159.5**2) / (2 * 80.0**2))
        assert w[0, 0] == pytest.approx(expected, rel=1e-6)

    def test_strictly_positive_even_when_underflowing(self):
        w = gaussian_window(201, 2.0).data
        assert (w > 0).all()

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ValueError):
            gaussian_window(5, 0.0)


class TestStitch:
    def test_single_crop_is_itself(self):
        rng = np.random.default_rng(1)
        src = grid1(rng.uniform(size=(16, 16)))
        w = gaussian_window(16, 4.0)
        res = stitch([(src, 0, 0)], w, (16, 16))
        assert res.fully_covered
        assert np.allclose(res.grid.data, src.data, atol=1e-6)

    def test_two_overlapping_uniform_weights(self):
        a = grid1(np.zeros((8, 8)))
        b = grid1(np.full((8, 8), 2.0))
        w = grid1(np.ones((8, 8)))
        res = stitch([(a, 0, 0), (b, 0, 0)], w, (8, 8))
        assert np.allclose(res.grid.data, 1.0, atol=1e-7)

    @pytest.mark.parametrize("step", [40, 60, 80])
    def test_identity_on_overlapping_crops(self, step):
        rng = np.random.default_rng(11)
        src = grid1(rng.uniform(0, 30, size=(300, 300)).astype(np.float32))
        crop = 120
        w = gaussian_window(crop, crop / 4)
        crops = []
        for r in window_origins(300, crop, step):
            for c in window_origins(300, crop, step):
                crops.append((src.crop(r, c, crop, crop), r, c))
        res = stitch(crops, w, (300, 300))
        assert res.fully_covered
        assert np.abs(res.grid.data - src.data).max() <= 1e-6

    def test_uncovered_pixels_flagged(self):
        a = grid1(np.ones((4, 4)))
        w = grid1(np.ones((4, 4)))
        res = stitch([(a, 0, 0)], w, (10, 10))
        assert not res.fully_covered
        assert res.valid[:4, :4].all()
        assert not res.valid[5:, 5:].any()
        assert res.coverage_fraction == pytest.approx(16 / 100)

    def test_shape_mismatch_rejected(self):
        a = grid1(np.ones((4, 4)))
        w = grid1(np.ones((5, 5)))
        with pytest.raises(ValueError, match="does not match weights"):
            stitch([(a, 0, 0)], w, (8, 8))

    def test_out_of_bounds_rejected(self):
        a = grid1(np.ones((4, 4)))
        w = grid1(np.ones((4, 4)))
        with pytest.raises(ValueError, match="fit inside"):
            stitch([(a, 7, 0)], w, (8, 8))

    def test_multichannel(self):
        rng = np.random.default_rng(5)
        src = RasterGrid(rng.uniform(size=(12, 12, 3)).astype(np.float32), 1.0)
        w = gaussian_window(6, 2.0)
        crops = []
        for r in window_origins(12, 6, 3):
            for c in window_origins(12, 6, 3):
                crops.append((src.crop(r, c, 6, 6), r, c))
        res = stitch(crops, w, (12, 12))
        assert np.abs(res.grid.data - src.data).max() <= 1e-6


class TestWindowOrigins:
    def test_edge_alignment_example(self):
        # 1190-wide tile, 320 crop, step 60: regular origins then an
        # edge-aligned final window
        got = window_origins(1190, 320, 60)
        assert got == list(range(0, 841, 60)) + [870]

    def test_exact_fit_no_extra(self):
        assert window_origins(320, 320, 60) == [0]
        assert window_origins(100, 50, 25) == [0, 25, 50]

    def test_crop_larger_than_extent(self):
        with pytest.raises(ValueError):
            window_origins(100, 120, 60)


class TestGridTypes:
    def test_rejects_nan(self):
        data = np.zeros((3, 3), dtype=np.float32)
        data[1, 1] = np.nan
        with pytest.raises(ValueError, match="NaN"):
            RasterGrid(data, 1.0)

    def test_rejects_bad_gsd(self):
        with pytest.raises(ValueError):
            RasterGrid(np.zeros((3, 3)), 0.0)

    def test_2d_promoted_to_single_channel(self):
        g = RasterGrid(np.zeros((3, 4)), 1.0)
        assert g.channels == 1
        assert g.shape_px == (3, 4)

    def test_label_range_enforced(self):
        with pytest.raises(ValueError, match="out of range"):
            LabelGrid(np.array([[0, 6]]), num_classes=6)
        with pytest.raises(ValueError):
            LabelGrid(np.array([[-1, 0]]), num_classes=2)

    def test_crop_bounds(self):
        g = RasterGrid(np.zeros((5, 5)), 1.0)
        with pytest.raises(ValueError):
            g.crop(3, 3, 3, 3)
