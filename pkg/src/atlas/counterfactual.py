"""Metadata-perturbation counterfactual retrieval analysis.

A fixed set of H&E query embeddings is fused once with a control text
embedding and once with a counterfactual text embedding (one shared text
vector per condition), retrieving two top-K mIF sets per query.  The
module quantifies what changed: label-composition shifts across queries,
per-biomarker abundance shifts stratified by morphology clusters of the
queries, the dominant variation modes of those shifts, and their
association with baseline biomarker state.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import stats
from .errors import ArgumentError, DegenerateStatisticsError
from .retrieval import query_batch, weighted_abundance

ALPHA_COUNTERFACTUAL = 0.6
RETRIEVAL_DEPTH_DEFAULT = 50
KMEANS_CLUSTERS_DEFAULT = 4
KMEANS_RESTARTS = 10
KMEANS_MAX_ITER = 300
PROTOTYPES_PER_CLUSTER = 3
MIN_CLUSTER_SIZE = 5

_TNM_PATTERN = re.compile(r"^T(\w+?)N(\w+?)M(\w+)$", re.IGNORECASE)


def parse_tnm(text):
    """Split a concatenated TNM string into its three stage fields.

    Returns {"t_stage": ..., "n_stage": ..., "m_stage": ...} or None when
    the string does not follow the T/N/M prefix layout.
    """
    if text is None:
        return None
    match = _TNM_PATTERN.match(text.strip())
    if match is None:
        return None
    return {
        "t_stage": "T" + match.group(1),
        "n_stage": "N" + match.group(2),
        "m_stage": "M" + match.group(3),
    }


@dataclass(frozen=True)
class CounterfactualRun:
    query_ids: tuple[str, ...]
    alpha: float
    k: int
    control_indices: np.ndarray  # (n_queries, k) gallery row indices
    control_scores: np.ndarray
    cf_indices: np.ndarray
    cf_scores: np.ndarray


def run_pair(queries_he, control_text, cf_text, index, alpha=ALPHA_COUNTERFACTUAL,
             k=RETRIEVAL_DEPTH_DEFAULT, query_ids=None):
    """Paired top-K retrieval under the control and counterfactual texts.

    Both text embeddings broadcast over all queries: every patch shares the
    same text vector under each condition.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ArgumentError("alpha must lie in [0, 1]")
    if index.abundance is None or not index.labels:
        raise ArgumentError("counterfactual analysis needs abundance and label tables")
    queries_he = np.asarray(queries_he, dtype=np.float64)
    control_text = np.asarray(control_text, dtype=np.float64)
    cf_text = np.asarray(cf_text, dtype=np.float64)
    if query_ids is None:
        query_ids = tuple(f"q{i}" for i in range(queries_he.shape[0]))
    fused_control = alpha * queries_he + (1.0 - alpha) * control_text
    fused_cf = alpha * queries_he + (1.0 - alpha) * cf_text
    c_idx, c_scores = query_batch(index, fused_control, k)
    f_idx, f_scores = query_batch(index, fused_cf, k)
    return CounterfactualRun(tuple(query_ids), alpha, min(k, index.n),
                             c_idx, c_scores, f_idx, f_scores)


@dataclass(frozen=True)
class CompositionShift:
    category: str
    mean_control: float
    mean_counterfactual: float
    p_value: float
    adjusted_p: float
    significant: bool


def composition_proportions(run, labels, category):
    """Within-query proportion of retrieved items carrying one category."""
    labels = np.asarray(labels, dtype=object)
    p0 = np.mean(labels[run.control_indices] == category, axis=1)
    p1 = np.mean(labels[run.cf_indices] == category, axis=1)
    return p0, p1


def composition_shift(run, labels, categories, q=0.05, test="rank_sum"):
    """Per-category composition change between the two conditions.

    ``test`` selects the reading of the paired comparison: "rank_sum"
    applies the two-sample rank-sum test to the paired proportion lists;
    "signed_rank" tests the per-query differences directly.  Adjusted
    p-values are Benjamini-Hochberg over the category set.
    """
    categories = list(categories)
    if not categories:
        raise ArgumentError("category set must be non-empty")
    if len(labels) == 0:
        raise ArgumentError("labels must cover the gallery")
    rows = []
    p_values = []
    for category in categories:
        p0, p1 = composition_proportions(run, labels, category)
        if np.array_equal(p0, p1):
            result = stats.TestResult(0.0, 1.0, (len(p0),), "degenerate: identical lists")
        elif test == "rank_sum":
            result = stats.mann_whitney_u(p0, p1, paired_presentation=True)
        elif test == "signed_rank":
            result = stats.wilcoxon_signed_rank(p1 - p0)
        else:
            raise ArgumentError("test must be 'rank_sum' or 'signed_rank'")
        rows.append((category, float(p0.mean()), float(p1.mean()), result.p_value))
        p_values.append(result.p_value)
    fdr = stats.bh_fdr(np.asarray(p_values), q=q)
    return [
        CompositionShift(category, m0, m1, p, float(adj), bool(rej))
        for (category, m0, m1, p), adj, rej in zip(rows, fdr.adjusted, fdr.rejected)
    ]


# ---------------------------------------------------------------------------
# K-means microenvironment clustering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClusterModel:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    seed: int


def _kmeans_pp_init(points, k, rng):
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[j] = points[int(rng.integers(n))]
            continue
        probs = d2 / total
        choice = int(rng.choice(n, p=probs))
        centroids[j] = points[choice]
        d2 = np.minimum(d2, np.sum((points - centroids[j]) ** 2, axis=1))
    return centroids


def _lloyd(points, centroids, max_iter, rng):
    k = centroids.shape[0]
    assignments = None
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assignments = d2.argmin(axis=1)
        for j in range(k):
            members = points[new_assignments == j]
            if members.shape[0] == 0:
                # reseed an empty cluster at the point farthest from its centroid
                farthest = int(np.argmax(d2.min(axis=1)))
                centroids[j] = points[farthest]
                new_assignments[farthest] = j
            else:
                centroids[j] = members.mean(axis=0)
        if assignments is not None and np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assignments = d2.argmin(axis=1)
    inertia = float(d2[np.arange(points.shape[0]), assignments].sum())
    return centroids, assignments, inertia


def kmeans_embed(embeddings, k=KMEANS_CLUSTERS_DEFAULT, seed=0,
                 restarts=KMEANS_RESTARTS, max_iter=KMEANS_MAX_ITER):
    """Best-of-restarts k-means++ clustering of embedding rows."""
    points = np.asarray(embeddings, dtype=np.float64)
    if points.ndim != 2:
        raise ArgumentError("embeddings must be a 2-D matrix")
    if points.shape[0] < k:
        raise ArgumentError(f"need at least {k} points for {k} clusters")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    best = None
    for _ in range(restarts):
        centroids = _kmeans_pp_init(points, k, rng)
        centroids, assignments, inertia = _lloyd(points, centroids.copy(), max_iter, rng)
        if best is None or inertia < best[2]:
            best = (centroids, assignments, inertia)
    return ClusterModel(best[0], best[1], best[2], seed)


def select_prototypes(model, embeddings, ids, m=PROTOTYPES_PER_CLUSTER):
    """Per cluster, the ids of the m members closest to the centroid."""
    points = np.asarray(embeddings, dtype=np.float64)
    ids = list(ids)
    out = {}
    for j in range(model.centroids.shape[0]):
        members = np.flatnonzero(model.assignments == j)
        dists = np.linalg.norm(points[members] - model.centroids[j], axis=1)
        order = members[np.argsort(dists, kind="stable")]
        out[j] = [ids[i] for i in order[:m]]
    return out


# ---------------------------------------------------------------------------
# Cluster-stratified biomarker shift testing
# ---------------------------------------------------------------------------

def shift_matrix(run, abundance):
    """Per-query counterfactual-minus-control weighted abundance shifts.

    Returns (mu_control, mu_counterfactual, shifts), each (n_queries, C).
    """
    n_q = len(run.query_ids)
    n_c = abundance.shape[1]
    mu0 = np.empty((n_q, n_c))
    mu1 = np.empty((n_q, n_c))
    for i in range(n_q):
        mu0[i] = weighted_abundance(run.control_indices[i], run.control_scores[i], abundance)
        mu1[i] = weighted_abundance(run.cf_indices[i], run.cf_scores[i], abundance)
    return mu0, mu1, mu1 - mu0


@dataclass(frozen=True)
class BiomarkerShift:
    channel: str
    mean_shift: float
    percent_change: float
    p_value: float
    adjusted_p: float
    significant: bool


@dataclass(frozen=True)
class ClusterShiftReport:
    cluster: int
    n_queries: int
    shifts: tuple  # BiomarkerShift per channel, channel order preserved
    status: str


def cluster_shift_test(run, assignments, abundance, channels, q=0.05,
                       min_cluster=MIN_CLUSTER_SIZE):
    """Signed-rank tests of per-cluster biomarker shifts against zero.

    FDR adjustment runs across channels within each cluster.  The percent
    change divides the mean shift by the cluster's mean control-condition
    weighted abundance.  Clusters smaller than ``min_cluster`` are skipped
    with a status note.
    """
    assignments = np.asarray(assignments)
    if len(assignments) != len(run.query_ids):
        raise ArgumentError("assignments must align with run queries")
    abundance = np.asarray(abundance, dtype=np.float64)
    if abundance.shape[1] != len(channels):
        raise ArgumentError("channel names must align with the abundance table")
    mu0, _, shifts = shift_matrix(run, abundance)
    reports = []
    for cluster in sorted(set(assignments.tolist())):
        members = np.flatnonzero(assignments == cluster)
        if members.size < min_cluster:
            reports.append(ClusterShiftReport(
                int(cluster), int(members.size), (),
                f"skipped: {members.size} < {min_cluster} members"))
            continue
        p_values = []
        mean_shifts = []
        pct_changes = []
        for c in range(len(channels)):
            d = shifts[members, c]
            d = d[~np.isnan(d)]
            if d.size == 0:
                p_values.append(1.0)
                mean_shifts.append(float("nan"))
                pct_changes.append(float("nan"))
                continue
            result = stats.wilcoxon_signed_rank(d)
            p_values.append(result.p_value)
            mean_shift = float(d.mean())
            baseline = float(np.nanmean(mu0[members, c]))
            mean_shifts.append(mean_shift)
            pct_changes.append(100.0 * mean_shift / baseline if baseline != 0.0
                               else float("nan"))
        fdr = stats.bh_fdr(np.asarray(p_values), q=q)
        shifts_out = tuple(
            BiomarkerShift(channels[c], mean_shifts[c], pct_changes[c],
                           p_values[c], float(fdr.adjusted[c]), bool(fdr.rejected[c]))
            for c in range(len(channels))
        )
        reports.append(ClusterShiftReport(int(cluster), int(members.size),
                                          shifts_out, "ok"))
    return reports


# ---------------------------------------------------------------------------
# PCA of shift vectors and baseline association
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PcaResult:
    scores: np.ndarray | None  # (n_kept_rows, 2)
    loadings: np.ndarray | None  # (n_kept_channels, 2)
    explained: np.ndarray | None  # fraction of variance per component
    kept_channels: tuple
    kept_rows: np.ndarray | None  # indices into the input rows
    status: str


def pca_shifts(shifts, channels=None):
    """Two-component PCA of the shift matrix.

    Columns that are NaN for every row are removed, then rows with any
    remaining NaN are excluded; columns are mean-centered without variance
    scaling and the covariance is eigendecomposed.  Signs follow the
    convention that each component's largest-magnitude loading is
    positive.
    """
    shifts = np.asarray(shifts, dtype=np.float64)
    if channels is None:
        channels = tuple(f"c{j}" for j in range(shifts.shape[1]))
    keep_cols = ~np.all(np.isnan(shifts), axis=0)
    kept_channels = tuple(c for c, keep in zip(channels, keep_cols) if keep)
    data = shifts[:, keep_cols]
    keep_rows = np.flatnonzero(~np.any(np.isnan(data), axis=1))
    data = data[keep_rows]
    if data.shape[0] < 3:
        return PcaResult(None, None, None, kept_channels, None,
                         "degenerate: fewer than 3 complete rows")
    if data.shape[1] < 2:
        return PcaResult(None, None, None, kept_channels, None,
                         "degenerate: fewer than 2 channels")
    centered = data - data.mean(axis=0)
    cov = centered.T @ centered / (data.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.maximum(eigvals[order], 0.0)
    eigvecs = eigvecs[:, order]
    total = eigvals.sum()
    if total <= 0.0:
        return PcaResult(None, None, None, kept_channels, None,
                         "degenerate: zero-variance shift matrix")
    loadings = eigvecs[:, :2]
    for comp in range(2):
        lead = np.argmax(np.abs(loadings[:, comp]))
        if loadings[lead, comp] < 0:
            loadings[:, comp] = -loadings[:, comp]
    scores = centered @ loadings
    explained = eigvals[:2] / total
    return PcaResult(scores, loadings, explained, kept_channels, keep_rows, "ok")


def baseline_association(baseline, pca_result, channels):
    """Pearson correlation of baseline abundance with PC1/PC2 scores.

    Entries whose correlation is undefined (constant baseline) are None
    rather than zero.  Baseline rows must align with the rows the PCA
    kept.
    """
    if pca_result.status != "ok":
        raise ArgumentError(f"PCA result unusable: {pca_result.status}")
    baseline = np.asarray(baseline, dtype=np.float64)
    if baseline.shape[0] != pca_result.scores.shape[0]:
        raise ArgumentError("baseline rows must align with PCA scores")
    if baseline.shape[1] != len(channels):
        raise ArgumentError("channel names must align with the baseline table")
    out = {}
    for j, channel in enumerate(channels):
        row = []
        for comp in range(2):
            try:
                row.append(stats.pearson(baseline[:, j], pca_result.scores[:, comp]))
            except DegenerateStatisticsError:
                row.append(None)
        out[channel] = tuple(row)
    return out
