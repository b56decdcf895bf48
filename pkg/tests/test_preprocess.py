"""Normalization and patch-extraction contract tests."""

import numpy as np
import pytest

from atlas import preprocess
from atlas.errors import ArgumentError, DegenerateMaskError, RegistrationError
from atlas.ingest import PatchCoord


def constant_image(h, w, bg=100, fg=1000):
    channel = np.full((h, w), bg, dtype=np.uint16)
    mask = np.zeros((h, w), dtype=bool)
    mask[: h // 2] = True
    channel[mask] = fg
    return channel, mask


class TestEstimateBounds:
    def test_constant_background_and_foreground(self):
        channel, mask = constant_image(32, 32)
        lo, hi = preprocess.estimate_bounds(channel, mask)
        assert lo == 100.0
        assert hi == pytest.approx(1100.0)

    def test_upper_clamped_to_u16_max(self):
        channel, mask = constant_image(16, 16, bg=10, fg=65000)
        lo, hi = preprocess.estimate_bounds(channel, mask)
        assert hi == 65535.0

    def test_margin_floor_applies(self):
        channel, mask = constant_image(16, 16, bg=1000, fg=1010)
        lo, hi = preprocess.estimate_bounds(channel, mask)
        assert lo == 1000.0
        assert hi == pytest.approx(1500.0)  # lo + default margin dominates

    def test_matches_sort_based_oracle(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            channel = rng.integers(0, 60000, size=(32, 32)).astype(np.uint16)
            mask = rng.uniform(size=(32, 32)) < 0.6
            if not mask.any() or mask.all():
                continue
            lo, hi = preprocess.estimate_bounds(channel, mask)
            bg = np.sort(channel[~mask].astype(float))
            fg = np.sort(channel[mask].astype(float))
            assert lo == pytest.approx(np.median(bg))
            expected_hi = min(65535.0, max(1.1 * np.percentile(fg, 99.0), lo + 500.0))
            assert hi == pytest.approx(expected_hi)

    def test_degenerate_mask_rejected(self):
        channel = np.zeros((4, 4), dtype=np.uint16)
        with pytest.raises(DegenerateMaskError):
            preprocess.estimate_bounds(channel, np.ones((4, 4), dtype=bool))
        with pytest.raises(DegenerateMaskError):
            preprocess.estimate_bounds(channel, np.zeros((4, 4), dtype=bool))


class TestRefineBounds:
    def test_no_qualifying_bin_falls_back(self):
        # every bin holds a single pixel, below the default min count of 8
        channel = np.linspace(0, 1000, 64).reshape(8, 8)
        lo2, hi2 = preprocess.refine_bounds(channel, 0.0, 1000.0)
        assert (lo2, hi2) == (0.0, 1000.0)

    def test_uniform_histogram_with_zero_min_count(self):
        channel = np.linspace(0.0, 1000.0, 256 * 16, endpoint=False).reshape(64, -1)
        lo2, hi2 = preprocess.refine_bounds(channel, 0.0, 1000.0,
                                            min_count=0, max_fraction=1.0)
        assert lo2 == 0.0
        assert hi2 == pytest.approx(1000.0)

    def test_bimodal_matches_histogram_oracle(self):
        rng = np.random.default_rng(3)
        channel = np.concatenate([
            rng.normal(200, 5, size=600),
            rng.normal(800, 5, size=600),
        ]).reshape(40, 30)
        lo, hi = 0.0, 1000.0
        lo2, hi2 = preprocess.refine_bounds(channel, lo, hi)
        counts, edges = np.histogram(channel[(channel >= lo) & (channel <= hi)],
                                     bins=256, range=(lo, hi))
        valid = [i for i, c in enumerate(counts) if 8 <= c <= 0.02 * counts.sum()]
        assert lo2 == pytest.approx(edges[valid[0]])
        assert hi2 == pytest.approx(edges[valid[-1] + 1])


class TestQuantize:
    def test_endpoints(self):
        plane = np.array([[100.0, 900.0]])
        out = preprocess.quantize_plane(plane, 100.0, 900.0)
        assert out[0, 0] == 0 and out[0, 1] == 255

    def test_midpoint_rounds_half_up(self):
        plane = np.array([[500.0]])
        assert preprocess.quantize_plane(plane, 100.0, 900.0)[0, 0] == 128

    def test_matches_per_pixel_oracle(self):
        rng = np.random.default_rng(23)
        plane = rng.uniform(0, 2000, size=(16, 16))
        out = preprocess.quantize_plane(plane, 250.0, 1750.0)
        expect = np.floor(255.0 * (np.clip(plane, 250.0, 1750.0) - 250.0) / 1500.0 + 0.5)
        np.testing.assert_array_equal(out, expect.astype(np.uint8))

    def test_degenerate_range_all_zero(self):
        plane = np.full((4, 4), 7.0)
        assert preprocess.quantize_plane(plane, 7.0, 7.0).sum() == 0

    def test_monotone(self):
        rng = np.random.default_rng(29)
        values = np.sort(rng.uniform(0, 3000, size=128))
        out = preprocess.quantize_plane(values.reshape(1, -1), 100.0, 2500.0)[0]
        assert np.all(np.diff(out.astype(int)) >= 0)

    def test_idempotent_through_identity_bounds(self):
        plane = np.arange(256, dtype=np.uint8).reshape(16, 16)
        out = preprocess.quantize_plane(plane, 0.0, 255.0)
        np.testing.assert_array_equal(out, plane)


class TestGeneratePatches:
    def test_stride_and_grid_positions(self):
        mask = np.ones((1024, 1024), dtype=bool)
        coords, status = preprocess.generate_patches(1024, 1024, mask, patch_size=256,
                                                     seed=0, jitter=0)
        assert status == "ok"
        starts = sorted({c.x_left for c in coords})
        assert starts == [0, 179, 358, 537, 716]
        assert len(coords) == 25

    def test_all_background_yields_nothing(self):
        mask = np.zeros((512, 512), dtype=bool)
        coords, status = preprocess.generate_patches(512, 512, mask, seed=1)
        assert coords == [] and status == "ok"

    def test_small_image_warns(self):
        mask = np.ones((100, 100), dtype=bool)
        coords, status = preprocess.generate_patches(100, 100, mask, patch_size=256)
        assert coords == [] and "smaller" in status

    def test_coverage_enforced_on_fuzzed_masks(self):
        rng = np.random.default_rng(37)
        for trial in range(10):
            h, w = int(rng.integers(300, 700)), int(rng.integers(300, 700))
            mask = rng.uniform(size=(h, w)) < rng.uniform(0.5, 1.0)
            coords, _ = preprocess.generate_patches(h, w, mask, seed=trial)
            for c in coords:
                window = mask[c.y_bottom:c.y_top, c.x_left:c.x_right]
                assert window.mean() > 0.9

    def test_deterministic_given_seed(self):
        mask = np.ones((800, 800), dtype=bool)
        a, _ = preprocess.generate_patches(800, 800, mask, seed=11)
        b, _ = preprocess.generate_patches(800, 800, mask, seed=11)
        assert a == b

    def test_jitter_stays_in_bounds(self):
        mask = np.ones((600, 600), dtype=bool)
        coords, _ = preprocess.generate_patches(600, 600, mask, seed=13)
        for c in coords:
            assert 0 <= c.x_left and c.x_right <= 600
            assert 0 <= c.y_bottom and c.y_top <= 600


class TestCropPair:
    def make_pair(self, h=512, w=512, c=3):
        he = np.arange(h * w * 3, dtype=np.uint8).reshape(h, w, 3)
        mif = preprocess.NormalizedImage(
            np.arange(c * h * w, dtype=np.uint32).reshape(c, h, w) % 256)
        return he, mif

    def test_origin_crop_equals_subarrays(self):
        he, mif = self.make_pair()
        coord = PatchCoord(0, 256, 0, 256)
        he_patch, mif_patch = preprocess.crop_pair(he, mif, coord)
        np.testing.assert_array_equal(he_patch, he[:256, :256])
        np.testing.assert_array_equal(mif_patch[..., 0], mif.channels[0, :256, :256])
        assert mif_patch.shape == (256, 256, 3)

    def test_channel_means_match_slicing_oracle(self):
        rng = np.random.default_rng(41)
        he, _ = self.make_pair()
        planes = rng.integers(0, 256, size=(4, 512, 512)).astype(np.uint8)
        mif = preprocess.NormalizedImage(planes)
        coord = PatchCoord(100, 356, 50, 306)
        _, mif_patch = preprocess.crop_pair(he, mif, coord)
        for ch in range(4):
            assert mif_patch[..., ch].mean() == pytest.approx(
                planes[ch, 50:306, 100:356].mean())

    def test_out_of_bounds_raises_registration_error(self):
        he, mif = self.make_pair(h=300, w=300)
        with pytest.raises(RegistrationError):
            preprocess.crop_pair(he, mif, PatchCoord(100, 356, 0, 256))

    def test_mismatched_dimensions_raise(self):
        he = np.zeros((200, 200, 3), dtype=np.uint8)
        mif = preprocess.NormalizedImage(np.zeros((2, 512, 512), dtype=np.uint8))
        with pytest.raises(RegistrationError):
            preprocess.crop_pair(he, mif, PatchCoord(0, 256, 0, 256))


class TestMultiplexImage:
    def test_mask_shape_validated(self):
        with pytest.raises(ArgumentError):
            preprocess.MultiplexImage(np.zeros((2, 10, 10)), np.zeros((5, 5)))

    def test_normalize_image_shapes(self):
        rng = np.random.default_rng(43)
        channels = rng.integers(0, 65535, size=(3, 64, 64)).astype(np.uint16)
        mask = rng.uniform(size=(64, 64)) < 0.7
        image = preprocess.MultiplexImage(channels, mask)
        normalized = preprocess.normalize_image(image)
        assert normalized.channels.shape == (3, 64, 64)
        assert normalized.channels.dtype == np.uint8
