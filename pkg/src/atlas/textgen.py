"""Patch-level text synthesis and metadata-side text manipulation.

Per-channel abundance is summarized against the other patches of the same
region (leave-one-out z-score and percentile), spatial organization is
condensed to a small set of metrics and a rule-based pattern word, and a
deterministic template turns everything into one description string.
Numeric summary values drive the ordering and level words but never appear
in the output.  The same module owns the inverse direction used by fusion
retrieval and counterfactual analysis: stripping biomarker sentences and
regenerating metadata-only text after field edits.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

from .errors import ArgumentError, DegenerateStatisticsError

EPSILON = 1e-8
GLCM_LEVELS = 8
Z_HIGH = 1.0
Z_LOW = -1.0

PATTERN_CATEGORIES = ("Sparse", "Uniform", "Clustered", "Heterogeneous", "Scattered")

# phrases that introduce molecular-profile sentences; extendable by callers
TRANSITION_PHRASES = (
    "regarding the molecular profile",
    "in terms of protein expression",
)


@lru_cache(maxsize=None)
def _templates():
    text = resources.files("atlas.templates").joinpath("patch_description.txt").read_text("utf-8")
    out = {}
    for line in text.splitlines():
        if not line or line.lstrip().startswith("#"):
            continue
        key, _, value = line.partition(" = ")
        out[key.strip()] = value
    return out


@dataclass(frozen=True)
class BiomarkerSummary:
    """Per-channel abundance summary for one patch within its region."""

    channels: tuple[str, ...]
    mu: np.ndarray
    z: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        z = np.asarray(self.z, dtype=float)
        pi = np.asarray(self.pi, dtype=float)
        n = len(self.channels)
        if not (mu.shape == z.shape == pi.shape == (n,)):
            raise ArgumentError("summary arrays must align with channel names")
        if pi.size and (pi.min() < 0.0 or pi.max() > 1.0):
            raise ArgumentError("percentiles must lie in [0, 1]")
        if not np.all(np.isfinite(z)):
            raise ArgumentError("z-scores must be finite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "pi", pi)


@dataclass(frozen=True)
class SpatialMetrics:
    cv: float | None
    clustering: float | None
    glcm_homogeneity: float | None
    glcm_contrast: float | None
    coverage: float


@dataclass(frozen=True)
class SpatialPattern:
    category: str
    density: str

    def __post_init__(self):
        if self.category not in PATTERN_CATEGORIES:
            raise ArgumentError(f"unknown pattern category {self.category!r}")


def patch_channel_mean(plane):
    """Mean over non-zero pixels; 0 when the plane has no signal."""
    plane = np.asarray(plane, dtype=float)
    fg = plane[plane > 0]
    return float(fg.mean()) if fg.size else 0.0


def loo_stats(all_means, k):
    """Leave-one-out z-score and percentile of patch k within its region.

    The standard deviation over the other patches uses the population
    convention (divide by their count).
    """
    means = np.asarray(all_means, dtype=float)
    if means.size < 2:
        raise DegenerateStatisticsError("leave-one-out statistics need at least 2 patches")
    if not (0 <= k < means.size):
        raise ArgumentError("patch index out of range")
    others = np.delete(means, k)
    z = (means[k] - others.mean()) / (others.std() + EPSILON)
    pi = float(np.mean(others <= means[k]))
    return float(z), pi


def glcm(plane, levels=GLCM_LEVELS):
    """Symmetric, normalized co-occurrence matrix at offset (0, +1).

    The 8-bit plane is quantized to ``levels`` equal gray bins; every
    horizontal neighbor pair contributes in both directions.
    """
    plane = np.asarray(plane)
    if plane.shape[1] < 2:
        raise ArgumentError("plane too narrow for a horizontal co-occurrence")
    q = (plane.astype(np.int64) * levels) // 256
    left = q[:, :-1].ravel()
    right = q[:, 1:].ravel()
    matrix = np.zeros((levels, levels), dtype=float)
    np.add.at(matrix, (left, right), 1.0)
    matrix = matrix + matrix.T
    return matrix / matrix.sum()


def glcm_features(matrix):
    idx = np.arange(matrix.shape[0])
    diff2 = (idx[:, None] - idx[None, :]) ** 2
    homogeneity = float(np.sum(matrix / (1.0 + diff2)))
    contrast = float(np.sum(matrix * diff2))
    return homogeneity, contrast


def spatial_metrics(plane):
    """Coverage, variability, gradient clustering and GLCM texture.

    Foreground is the set of non-zero pixels.  An empty foreground yields
    coverage 0 with null texture fields.
    """
    plane = np.asarray(plane)
    fg_mask = plane > 0
    coverage = float(fg_mask.mean())
    if not fg_mask.any():
        return SpatialMetrics(None, None, None, None, 0.0)
    fg = plane[fg_mask].astype(float)
    cv = float(fg.std() / (fg.mean() + EPSILON))
    gy, gx = np.gradient(plane.astype(float))
    magnitude = np.sqrt(gx**2 + gy**2)
    clustering = float(1.0 / (1.0 + magnitude[fg_mask].mean()))
    homogeneity, contrast = glcm_features(glcm(plane))
    return SpatialMetrics(cv, clustering, homogeneity, contrast, coverage)


def _density_word(coverage):
    t = _templates()
    if coverage < 0.1:
        return t["density_minimal"]
    if coverage <= 0.3:
        return t["density_limited"]
    if coverage <= 0.7:
        return t["density_moderate"]
    return t["density_extensive"]


def assign_pattern(metrics):
    """Map continuous spatial metrics to one discrete pattern label.

    Total over valid metrics: coverage below 0.1 short-circuits to Sparse
    before any texture field is read, which covers the null-texture case.
    """
    cov = metrics.coverage
    density = _density_word(cov)
    if cov < 0.1:
        return SpatialPattern("Sparse", density)
    if cov > 0.7:
        if metrics.cv < 0.5 and metrics.glcm_homogeneity > 0.6:
            return SpatialPattern("Uniform", density)
        if metrics.clustering > 0.7:
            return SpatialPattern("Clustered", density)
        return SpatialPattern("Heterogeneous", density)
    if cov > 0.3:
        if metrics.clustering > 0.6:
            return SpatialPattern("Clustered", density)
        if metrics.cv < 0.6:
            return SpatialPattern("Uniform", density)
        return SpatialPattern("Heterogeneous", density)
    if metrics.clustering > 0.5:
        return SpatialPattern("Clustered", density)
    return SpatialPattern("Scattered", density)


def _level_word(z):
    t = _templates()
    if z >= Z_HIGH:
        return t["level_high"]
    if z <= Z_LOW:
        return t["level_low"]
    return t["level_moderate"]


def _format_months(months):
    return f"{months:g}"


def build_clinical_prefix(metadata):
    """Deterministic clinical sentences plus a trailing separator space.

    Returns "" when metadata is None; otherwise the sentence block ends
    with one space so the molecular-profile section can be appended
    directly and stripped back off exactly.
    """
    if metadata is None:
        return ""
    t = _templates()
    sentences = [t["clinical_main"].format(
        tissue_type=metadata.tissue_type,
        organ_type=metadata.organ_type,
        disease=metadata.disease,
    )]
    staging = "".join(s for s in (metadata.t_stage, metadata.n_stage, metadata.m_stage) if s)
    if staging and metadata.grade:
        sentences.append(t["clinical_staging_full"].format(staging=staging, grade=metadata.grade))
    elif staging:
        sentences.append(t["clinical_staging_only"].format(staging=staging))
    elif metadata.grade:
        sentences.append(t["clinical_grade_only"].format(grade=metadata.grade))
    if metadata.survival_status is not None:
        status = metadata.survival_status.lower()
        if metadata.survival_months is not None:
            sentences.append(t["clinical_survival_full"].format(
                status=status, months=_format_months(metadata.survival_months)))
        else:
            sentences.append(t["clinical_survival_status_only"].format(status=status))
    if metadata.treatment_response is True:
        sentences.append(t["clinical_response_positive"])
    elif metadata.treatment_response is False:
        sentences.append(t["clinical_response_negative"])
    if metadata.annotation:
        sentences.append(t["clinical_annotation"].format(annotation=metadata.annotation))
    return " ".join(sentences) + " "


def synthesize_text(summary, patterns, metadata=None):
    """Full patch description: clinical prefix plus molecular sentences.

    Channel clauses are ordered by descending z-score (stable on ties) and
    carry only qualitative words; the numeric summary never leaks into the
    output.
    """
    if len(patterns) != len(summary.channels):
        raise ArgumentError("patterns must align with summary channels")
    t = _templates()
    order = np.argsort(-summary.z, kind="stable")
    clauses = []
    for idx in order:
        pattern = patterns[idx]
        clauses.append(t["channel_clause"].format(
            name=summary.channels[idx],
            level=_level_word(summary.z[idx]),
            density=pattern.density,
            pattern=t["pattern_" + pattern.category.lower()],
        ))
    molecular = (t["transition"] + " "
                 + (t["clause_separator"] + " ").join(clauses) + t["clause_terminator"])
    return build_clinical_prefix(metadata) + molecular


def strip_biomarkers(text, phrases=TRANSITION_PHRASES):
    """Truncate at the first transition phrase (case-insensitive)."""
    lowered = text.lower()
    cut = min((i for i in (lowered.find(p.lower()) for p in phrases) if i >= 0),
              default=None)
    return text if cut is None else text[:cut]


def perturb_metadata(metadata, edits):
    """Apply field edits and regenerate the metadata-only description.

    Unedited fields reproduce byte-identical sentences because the
    template path is deterministic.
    """
    edited = metadata.edited(**edits)
    return edited, build_clinical_prefix(edited)


def region_summary(mu_table, channels):
    """Leave-one-out summaries for every patch of one region.

    mu_table has shape (n_patches, n_channels).  Returns one
    BiomarkerSummary per patch.
    """
    mu_table = np.asarray(mu_table, dtype=float)
    n, c = mu_table.shape
    if len(channels) != c:
        raise ArgumentError("channel names must match table width")
    summaries = []
    for k in range(n):
        z = np.empty(c)
        pi = np.empty(c)
        for j in range(c):
            z[j], pi[j] = loo_stats(mu_table[:, j], k)
        summaries.append(BiomarkerSummary(tuple(channels), mu_table[k], z, pi))
    return summaries
