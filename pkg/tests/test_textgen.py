"""Text synthesis, spatial metrics and pattern rule tests."""

import itertools
import re

import numpy as np
import pytest

from atlas import textgen
from atlas.errors import ArgumentError, DegenerateStatisticsError
from atlas.ingest import ClinicalMetadata


def metadata_fixture():
    return ClinicalMetadata(
        organ_type="breast", disease="breast cancer", tissue_type="primary tumor",
        t_stage="T2", n_stage="N0", m_stage="M0", grade="G2",
        survival_status="Deceased", survival_months=25.0, treatment_response=False,
    )


def summary_fixture():
    return textgen.BiomarkerSummary(
        channels=("GranzymeB", "PanCK", "Vimentin"),
        mu=np.array([180.0, 140.0, 30.0]),
        z=np.array([2.0, 0.3, -2.0]),
        pi=np.array([0.95, 0.6, 0.05]),
    )


def patterns_fixture():
    return [
        textgen.SpatialPattern("Clustered", "extensive"),
        textgen.SpatialPattern("Uniform", "moderate"),
        textgen.SpatialPattern("Scattered", "limited"),
    ]


class TestPatchChannelMean:
    def test_all_zero_plane(self):
        assert textgen.patch_channel_mean(np.zeros((8, 8))) == 0.0

    def test_nonzero_filter(self):
        assert textgen.patch_channel_mean(np.array([0.0, 0.0, 10.0, 30.0])) == 20.0

    def test_matches_filtered_mean_oracle(self):
        rng = np.random.default_rng(3)
        plane = rng.integers(0, 5, size=(16, 16)).astype(float)
        expected = plane[plane > 0].mean()
        assert textgen.patch_channel_mean(plane) == pytest.approx(expected)


class TestLooStats:
    def test_all_equal_means(self):
        z, pi = textgen.loo_stats([5.0, 5.0, 5.0, 5.0], 1)
        assert z == 0.0 and pi == 1.0

    def test_hand_evaluated_case(self):
        z, pi = textgen.loo_stats([1.0, 2.0, 3.0], 2)
        assert pi == 1.0
        assert z == pytest.approx((3.0 - 1.5) / (0.5 + textgen.EPSILON))

    def test_unique_minimum_percentile_zero(self):
        _, pi = textgen.loo_stats([1.0, 2.0, 3.0], 0)
        assert pi == 0.0

    def test_single_patch_region_rejected(self):
        with pytest.raises(DegenerateStatisticsError):
            textgen.loo_stats([1.0], 0)

    def test_matches_brute_force_on_small_regions(self):
        grid = [0.0, 1.0, 2.0]
        for n in range(2, 5):
            for values in itertools.product(grid, repeat=n):
                for k in range(n):
                    z, pi = textgen.loo_stats(values, k)
                    others = [v for i, v in enumerate(values) if i != k]
                    mean = sum(others) / len(others)
                    var = sum((v - mean) ** 2 for v in others) / len(others)
                    z_expect = (values[k] - mean) / (var**0.5 + textgen.EPSILON)
                    pi_expect = sum(v <= values[k] for v in others) / len(others)
                    assert z == pytest.approx(z_expect, abs=1e-12)
                    assert pi == pytest.approx(pi_expect, abs=1e-12)


class TestSpatialMetrics:
    def test_constant_nonzero_plane(self):
        m = textgen.spatial_metrics(np.full((16, 16), 100, dtype=np.uint8))
        assert m.cv == 0.0
        assert m.clustering == 1.0
        assert m.glcm_homogeneity == pytest.approx(1.0)
        assert m.glcm_contrast == 0.0
        assert m.coverage == 1.0

    def test_half_zero_coverage(self):
        plane = np.zeros((16, 16), dtype=np.uint8)
        plane[:8] = 50
        assert textgen.spatial_metrics(plane).coverage == 0.5

    def test_empty_foreground_null_texture(self):
        m = textgen.spatial_metrics(np.zeros((8, 8), dtype=np.uint8))
        assert m.coverage == 0.0
        assert m.cv is None and m.glcm_contrast is None

    def test_checkerboard_contrast_matches_enumeration(self):
        # adjacent gray levels: quantized levels differ by exactly 1
        plane = np.zeros((8, 8), dtype=np.uint8)
        plane[::2, ::2] = 32   # level 1
        plane[1::2, 1::2] = 32
        plane[::2, 1::2] = 64  # level 2
        plane[1::2, ::2] = 64
        matrix = textgen.glcm(plane)
        homogeneity, contrast = textgen.glcm_features(matrix)
        # every horizontal neighbor pair is (1,2) or (2,1)
        assert contrast == pytest.approx(1.0)
        assert homogeneity == pytest.approx(0.5)

    def test_glcm_matches_pair_enumeration_oracle(self):
        rng = np.random.default_rng(9)
        plane = rng.integers(0, 256, size=(8, 8)).astype(np.uint8)
        matrix = textgen.glcm(plane)
        counts = np.zeros((8, 8))
        q = plane.astype(int) * 8 // 256
        for y in range(8):
            for x in range(7):
                counts[q[y, x], q[y, x + 1]] += 1
                counts[q[y, x + 1], q[y, x]] += 1
        np.testing.assert_allclose(matrix, counts / counts.sum(), atol=1e-15)
        h_expect = sum(counts[i, j] / counts.sum() / (1 + (i - j) ** 2)
                       for i in range(8) for j in range(8))
        c_expect = sum(counts[i, j] / counts.sum() * (i - j) ** 2
                       for i in range(8) for j in range(8))
        homogeneity, contrast = textgen.glcm_features(matrix)
        assert homogeneity == pytest.approx(h_expect, abs=1e-12)
        assert contrast == pytest.approx(c_expect, abs=1e-12)


class TestAssignPattern:
    def test_low_coverage_sparse(self):
        m = textgen.SpatialMetrics(0.4, 0.5, 0.5, 1.0, 0.05)
        assert textgen.assign_pattern(m).category == "Sparse"

    def test_high_coverage_uniform(self):
        m = textgen.SpatialMetrics(0.3, 0.5, 0.7, 1.0, 0.8)
        assert textgen.assign_pattern(m).category == "Uniform"

    def test_low_mid_coverage_scattered(self):
        m = textgen.SpatialMetrics(0.9, 0.4, 0.5, 1.0, 0.2)
        assert textgen.assign_pattern(m).category == "Scattered"

    def test_total_over_fuzzed_tuples(self):
        rng = np.random.default_rng(21)
        cov = rng.uniform(0, 1, size=20000)
        cv = rng.uniform(0, 3, size=20000)
        clust = rng.uniform(0, 1, size=20000)
        homog = rng.uniform(0, 1, size=20000)
        contrast = rng.uniform(0, 10, size=20000)
        for i in range(20000):
            m = textgen.SpatialMetrics(cv[i], clust[i], homog[i], contrast[i], cov[i])
            assert textgen.assign_pattern(m).category in textgen.PATTERN_CATEGORIES


class TestSynthesizeText:
    def test_golden_string(self):
        text = textgen.synthesize_text(summary_fixture(), patterns_fixture(),
                                       metadata_fixture())
        expected = (
            "This primary tumor sample is from the breast of a patient diagnosed "
            "with breast cancer. Tumor staging is T2N0M0, grade G2. The patient is "
            "deceased with a recorded survival of 25 months. The patient did not "
            "respond to treatment. Regarding the molecular profile, GranzymeB shows "
            "high abundance with extensive coverage in a clustered pattern; PanCK "
            "shows moderate abundance with moderate coverage in a uniform pattern; "
            "Vimentin shows low abundance with limited coverage in a scattered "
            "pattern."
        )
        assert text == expected

    def test_absent_metadata_starts_at_molecular_clause(self):
        text = textgen.synthesize_text(summary_fixture(), patterns_fixture(), None)
        assert text.startswith("Regarding the molecular profile,")

    def test_channel_order_by_descending_z(self):
        summary = textgen.BiomarkerSummary(
            channels=("Low", "High"), mu=np.array([10.0, 200.0]),
            z=np.array([-2.0, 2.0]), pi=np.array([0.1, 0.9]))
        patterns = [textgen.SpatialPattern("Uniform", "moderate")] * 2
        text = textgen.synthesize_text(summary, patterns, None)
        assert text.index("High") < text.index("Low")

    def test_no_digits_from_summary_values(self):
        summary = textgen.BiomarkerSummary(
            channels=("GranzymeB", "PanCK"), mu=np.array([123.456, 7.89]),
            z=np.array([1.5, -1.5]), pi=np.array([0.77, 0.13]))
        patterns = [textgen.SpatialPattern("Clustered", "extensive")] * 2
        text = textgen.synthesize_text(summary, patterns, None)
        assert re.search(r"\d", text) is None

    def test_deterministic(self):
        args = (summary_fixture(), patterns_fixture(), metadata_fixture())
        assert textgen.synthesize_text(*args) == textgen.synthesize_text(*args)

    def test_mismatched_patterns_rejected(self):
        with pytest.raises(ArgumentError):
            textgen.synthesize_text(summary_fixture(), patterns_fixture()[:2], None)


class TestStripBiomarkers:
    def test_strips_to_clinical_prefix(self):
        full = textgen.synthesize_text(summary_fixture(), patterns_fixture(),
                                       metadata_fixture())
        prefix = textgen.strip_biomarkers(full)
        assert prefix == textgen.build_clinical_prefix(metadata_fixture())
        assert "molecular" not in prefix

    def test_identity_without_phrase(self):
        assert textgen.strip_biomarkers("No transition here.") == "No transition here."

    def test_phrase_at_position_zero(self):
        full = textgen.synthesize_text(summary_fixture(), patterns_fixture(), None)
        assert textgen.strip_biomarkers(full) == ""

    def test_case_insensitive_and_alternate_phrase(self):
        text = "Clinical context. IN TERMS OF PROTEIN EXPRESSION, CD8 is high."
        assert textgen.strip_biomarkers(text) == "Clinical context. "


class TestPerturbMetadata:
    def test_staging_edit_changes_only_staging_clause(self):
        meta = metadata_fixture()
        edited, text = textgen.perturb_metadata(
            meta, {"t_stage": "T4", "n_stage": "N2", "m_stage": "M1", "grade": "G3"})
        original = textgen.build_clinical_prefix(meta)
        assert "T4N2M1, grade G3" in text
        assert "T2N0M0" not in text
        # non-staging sentences byte-identical
        assert text.split("Tumor staging")[0] == original.split("Tumor staging")[0]
        assert text.split("grade G3. ")[1] == original.split("grade G2. ")[1]
        assert edited.organ_type == meta.organ_type

    def test_survival_edit_changes_only_survival_clause(self):
        meta = metadata_fixture()
        _, text = textgen.perturb_metadata(meta, {"survival_status": "Alive"})
        assert "The patient is alive" in text
        assert "deceased" not in text
        original = textgen.build_clinical_prefix(meta)
        assert text.split("The patient is")[0] == original.split("The patient is")[0]

    def test_empty_edit_map_identity(self):
        meta = metadata_fixture()
        edited, text = textgen.perturb_metadata(meta, {})
        assert edited == meta
        assert text == textgen.build_clinical_prefix(meta)

    def test_unknown_field_rejected(self):
        with pytest.raises(ArgumentError):
            textgen.perturb_metadata(metadata_fixture(), {"bogus_field": "x"})


class TestRegionSummary:
    def test_region_summary_matches_loo(self):
        rng = np.random.default_rng(31)
        table = rng.uniform(0, 255, size=(5, 3))
        summaries = textgen.region_summary(table, ("A", "B", "C"))
        for k, s in enumerate(summaries):
            for j in range(3):
                z, pi = textgen.loo_stats(table[:, j], k)
                assert s.z[j] == pytest.approx(z)
                assert s.pi[j] == pytest.approx(pi)
