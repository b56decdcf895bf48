"""Exact cosine-ranked retrieval over an immutable embedding gallery.

Scores are brute-force dot products against unit gallery rows, computed in
blocks so large galleries stay cache-friendly.  Score-level fusion and
fused-query retrieval are algebraically identical because the fused query
is deliberately not re-normalized; a flag re-normalizes it for
experimentation, which changes scores by a positive per-query factor and
therefore never changes ranks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import stats
from .errors import (
    ArgumentError,
    DegenerateStatisticsError,
    EmptyGalleryError,
    EvaluationError,
)

QUERY_BLOCK_ROWS = 4096
BIOMARKER_TOP_K_DEFAULT = 50
PCC_PRESENCE_THRESHOLD = 0.8
ALPHA_GRID_DEFAULT = tuple(np.round(np.arange(0.0, 1.01, 0.1), 1))


def default_prompt_templates():
    """Zero-shot prompt templates shipped with the package, one per line."""
    from importlib import resources

    text = resources.files("atlas.templates").joinpath(
        "prompt_templates.txt").read_text("utf-8")
    return tuple(line for line in text.splitlines()
                 if line and not line.lstrip().startswith("#"))


@dataclass(frozen=True)
class FusionQuery:
    """Convex combination of an H&E and a text embedding.

    The fused vector is not re-normalized by default, preserving the exact
    algebraic identity with score-level fusion; ``renormalize`` rescales it
    to unit norm for experimentation, which multiplies every score by the
    same positive factor and therefore never changes ranks.
    """

    he: np.ndarray
    txt: np.ndarray
    alpha: float
    renormalize: bool = False

    def __post_init__(self):
        he = np.asarray(self.he, dtype=np.float64)
        txt = np.asarray(self.txt, dtype=np.float64)
        if not (0.0 <= self.alpha <= 1.0):
            raise ArgumentError("alpha must lie in [0, 1]")
        if he.shape != txt.shape or he.ndim != 1:
            raise ArgumentError("component embeddings must be equal-length vectors")
        object.__setattr__(self, "he", he)
        object.__setattr__(self, "txt", txt)

    def fused(self):
        vec = self.alpha * self.he + (1.0 - self.alpha) * self.txt
        if self.renormalize:
            norm = np.linalg.norm(vec)
            if norm > 0.0:
                vec = vec / norm
        return vec


@dataclass(frozen=True)
class RankedList:
    query_id: str
    ids: tuple[str, ...]
    indices: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if np.any(np.diff(scores) > 1e-12):
            raise ArgumentError("scores must be non-increasing")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=np.int64))


class EmbeddingIndex:
    """Immutable gallery of unit embeddings with optional side tables.

    labels maps column name -> sequence of string labels (None for
    unlabeled rows).  abundance is an N x C float table (NaN = missing)
    aligned with ``channels``.  region_ids groups rows for per-region
    evaluation.
    """

    def __init__(self, modality, rows, ids, labels=None, abundance=None,
                 channels=None, region_ids=None, assume_normalized=False):
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ArgumentError("rows must be 2-D")
        if rows.shape[0] != len(ids):
            raise ArgumentError("ids must align with rows")
        if assume_normalized:
            # trusted path for snapshot restore: rows are stored exactly as
            # they were served, so renormalizing would perturb rankings
            self._rows = rows.copy()
        else:
            norms = np.linalg.norm(rows, axis=1, keepdims=True)
            norms[norms == 0.0] = 1.0
            self._rows = rows / norms
        self._rows.setflags(write=False)
        self.modality = modality
        self.ids = tuple(ids)
        self._id_to_index = {pid: i for i, pid in enumerate(self.ids)}
        self.labels = {}
        if labels:
            for col, values in labels.items():
                if len(values) != rows.shape[0]:
                    raise ArgumentError(f"label column {col!r} length mismatch")
                self.labels[col] = tuple(values)
        if abundance is not None:
            abundance = np.asarray(abundance, dtype=np.float64)
            if abundance.shape[0] != rows.shape[0]:
                raise ArgumentError("abundance table must have one row per embedding")
            if channels is None or abundance.shape[1] != len(channels):
                raise ArgumentError("abundance table needs aligned channel names")
            abundance.setflags(write=False)
        self.abundance = abundance
        self.channels = tuple(channels) if channels is not None else None
        if region_ids is not None and len(region_ids) != rows.shape[0]:
            raise ArgumentError("region_ids must align with rows")
        self.region_ids = tuple(region_ids) if region_ids is not None else None

    @property
    def rows(self):
        return self._rows

    @property
    def n(self):
        return self._rows.shape[0]

    @property
    def dim(self):
        return self._rows.shape[1]

    def row_of(self, patch_id):
        return self._rows[self._id_to_index[patch_id]]

    def index_of(self, patch_id):
        return self._id_to_index[patch_id]


def build_index(embeddings, labels=None, abundance=None, channels=None, region_ids=None):
    """Normalize an EmbeddingMatrix into an immutable gallery."""
    return EmbeddingIndex(embeddings.modality, embeddings.rows, embeddings.ids,
                          labels=labels, abundance=abundance, channels=channels,
                          region_ids=region_ids)


def _top_k(scores, k):
    """Indices of the k best scores, ties broken by ascending index.

    Equivalent to a stable full argsort of the negated scores, but large
    galleries take an argpartition fast path: candidates strictly above
    the k-th score plus every index tied at the boundary, stably sorted.
    """
    n = scores.shape[0]
    if k >= n or n < 1024:
        return np.argsort(-scores, kind="stable")[:k]
    part = np.argpartition(-scores, k - 1)[:k]
    boundary = scores[part].min()
    candidates = np.flatnonzero(scores >= boundary)
    order = candidates[np.argsort(-scores[candidates], kind="stable")]
    return order[:k]


def query(index, q, k, query_id="query", exclude_region=None):
    """Rank the gallery for one query by dot product against unit rows.

    ``q`` may be a plain vector (pass a unit vector to read scores as
    cosines) or a FusionQuery, whose fused vector is scored as-is.  k
    larger than the gallery is clipped with a note in the query id.
    ``exclude_region`` drops gallery rows with that region id from the
    ranking (the retrieval protocol is global by default; this flag
    supports the exclude-own-slice reading).
    """
    if index.n == 0:
        raise EmptyGalleryError("cannot query an empty gallery")
    if k < 1:
        raise ArgumentError("k must be at least 1")
    vec = q.fused() if isinstance(q, FusionQuery) else np.asarray(q, dtype=np.float64)
    if vec.shape != (index.dim,):
        raise ArgumentError(f"query dim {vec.shape} does not match gallery dim {index.dim}")
    scores = index.rows @ vec
    if exclude_region is not None:
        if index.region_ids is None:
            raise ArgumentError("index has no region ids to exclude by")
        keep = np.asarray([r != exclude_region for r in index.region_ids])
        if not keep.any():
            raise EmptyGalleryError("exclusion removed every gallery row")
        scores = np.where(keep, scores, -np.inf)
        k = min(k, int(keep.sum()))
    if k > index.n:
        k = index.n
        query_id = f"{query_id} (k clipped to {k})"
    top = _top_k(scores, k)
    return RankedList(query_id, tuple(index.ids[i] for i in top), top, scores[top])


def query_batch(index, matrix, k):
    """Top-k indices and scores for many queries, in blocks.

    Returns (indices, scores) arrays of shape (n_queries, k).
    """
    if index.n == 0:
        raise EmptyGalleryError("cannot query an empty gallery")
    matrix = np.asarray(matrix, dtype=np.float64)
    k = min(k, index.n)
    out_idx = np.empty((matrix.shape[0], k), dtype=np.int64)
    out_scores = np.empty((matrix.shape[0], k), dtype=np.float64)
    for start in range(0, matrix.shape[0], QUERY_BLOCK_ROWS):
        block = matrix[start:start + QUERY_BLOCK_ROWS]
        scores = block @ index.rows.T
        for i, row in enumerate(scores):
            top = _top_k(row, k)
            out_idx[start + i] = top
            out_scores[start + i] = row[top]
    return out_idx, out_scores


def recall_at_k(ranked_lists, truth, k):
    """Macro-averaged fraction of queries whose truth id is in the top k."""
    if not ranked_lists:
        raise EvaluationError("no queries to evaluate")
    hits = 0
    for ranked in ranked_lists:
        if ranked.query_id not in truth:
            raise EvaluationError(f"missing ground truth for query {ranked.query_id!r}")
        hits += truth[ranked.query_id] in ranked.ids[:k]
    return hits / len(ranked_lists)


def recall_from_paired(index, queries, k):
    """Recall@k when query i's truth is gallery row i (paired evaluation)."""
    idx, _ = query_batch(index, queries, k)
    target = np.arange(idx.shape[0])[:, None]
    return float(np.mean(np.any(idx == target, axis=1)))


def knn_classify(index, q, label_column, k=1):
    """Similarity-weighted vote over the top-k neighbors' labels.

    Ties between classes resolve to the class that appears first in
    sorted class order (deterministic).
    """
    if label_column not in index.labels:
        raise ArgumentError(f"index has no label column {label_column!r}")
    ranked = query(index, q, k)
    votes = {}
    for idx, score in zip(ranked.indices, ranked.scores):
        label = index.labels[label_column][idx]
        if label is None:
            continue
        votes[label] = votes.get(label, 0.0) + float(score)
    if not votes:
        raise EvaluationError("all retrieved neighbors are unlabeled")
    return max(sorted(votes), key=lambda c: votes[c])


def macro_f1(y_true, y_pred, classes=None):
    """Macro-averaged F1; classes absent from both sides are skipped."""
    if classes is None:
        classes = sorted(set(y_true) | set(y_pred))
    y_true = list(y_true)
    y_pred = list(y_pred)
    scores = []
    for c in classes:
        tp = sum(t == c and p == c for t, p in zip(y_true, y_pred))
        fp = sum(t != c and p == c for t, p in zip(y_true, y_pred))
        fn = sum(t == c and p != c for t, p in zip(y_true, y_pred))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


@dataclass(frozen=True)
class ZeroShotResult:
    per_template_f1: tuple[float, ...]
    f1_mean: float
    f1_std: float
    predictions: dict  # template -> tuple of predicted labels
    baseline_mean: float
    baseline_std: float


def zero_shot(image_embeddings, y_true, class_names, embed_text, templates=None,
              seed=0, baseline_repeats=10):
    """Prompt-prototype classification with a uniform random baseline.

    For each template, every class name is formatted into the template,
    embedded by ``embed_text`` and L2-normalized; images are assigned to
    the nearest prototype by cosine.  Metrics are summarized as mean and
    std over templates; the baseline samples uniform labels
    ``baseline_repeats`` times.  Omitting ``templates`` uses the packaged
    five-template set.
    """
    if templates is None:
        templates = default_prompt_templates()
    if len(class_names) != len(set(class_names)):
        raise ArgumentError("duplicate class names")
    if len(class_names) < 2:
        raise ArgumentError("need at least 2 classes")
    if not templates:
        raise ArgumentError("need at least one template")
    images = np.asarray(image_embeddings, dtype=np.float64)
    norms = np.linalg.norm(images, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    images = images / norms

    per_template = []
    predictions = {}
    for template in templates:
        prototypes = []
        for name in class_names:
            vec = np.asarray(embed_text(template.format(name)), dtype=np.float64)
            vec = vec / max(np.linalg.norm(vec), 1e-300)
            prototypes.append(vec)
        sims = images @ np.asarray(prototypes).T
        pred = tuple(class_names[i] for i in np.argmax(sims, axis=1))
        predictions[template] = pred
        per_template.append(macro_f1(y_true, pred, classes=class_names))

    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    baseline = [
        macro_f1(y_true, rng.choice(class_names, size=len(y_true)), classes=class_names)
        for _ in range(baseline_repeats)
    ]
    return ZeroShotResult(
        tuple(per_template),
        float(np.mean(per_template)),
        float(np.std(per_template)),
        predictions,
        float(np.mean(baseline)),
        float(np.std(baseline)),
    )


def fuse_scores(z_he, z_txt, index, alpha, k, query_id="query"):
    """Score-level fusion ranking: alpha * (he . g) + (1-alpha) * (txt . g)."""
    if not (0.0 <= alpha <= 1.0):
        raise ArgumentError("alpha must lie in [0, 1]")
    if index.n == 0:
        raise EmptyGalleryError("cannot query an empty gallery")
    z_he = np.asarray(z_he, dtype=np.float64)
    z_txt = np.asarray(z_txt, dtype=np.float64)
    scores = alpha * (index.rows @ z_he) + (1.0 - alpha) * (index.rows @ z_txt)
    k = min(k, index.n)
    top = _top_k(scores, k)
    return RankedList(query_id, tuple(index.ids[i] for i in top), top, scores[top])


def grid_alpha(objective, grid=ALPHA_GRID_DEFAULT):
    """Maximize a per-alpha objective over a grid; ties pick the smaller alpha.

    ``objective`` is a callable alpha -> float (mean PCC or Recall@K in the
    standard protocols).  Returns (best_alpha, {alpha: value}).
    """
    grid = tuple(grid)
    if not grid:
        raise ArgumentError("alpha grid must be non-empty")
    values = {}
    best_alpha, best_value = None, -np.inf
    for alpha in grid:
        value = float(objective(alpha))
        values[alpha] = value
        if value > best_value:
            best_alpha, best_value = alpha, value
    return best_alpha, values


def weighted_abundance(indices, scores, abundance):
    """Similarity-score-weighted abundance over a retrieved set.

    Shared kernel for biomarker inference and counterfactual shift
    analysis.  NaN abundance entries are excluded per channel; a channel
    with no observed values yields NaN.
    """
    scores = np.asarray(scores, dtype=np.float64)
    total = scores.sum()
    if total <= 0.0:
        raise DegenerateStatisticsError("non-positive total retrieval score")
    table = abundance[np.asarray(indices, dtype=np.int64)]
    weights = np.repeat(scores[:, None], table.shape[1], axis=1)
    weights = np.where(np.isnan(table), 0.0, weights)
    values = np.where(np.isnan(table), 0.0, table)
    denom = weights.sum(axis=0)
    out = np.full(table.shape[1], np.nan)
    ok = denom > 0.0
    out[ok] = (weights * values).sum(axis=0)[ok] / denom[ok]
    return out


def infer_biomarkers(ranked, index, k=BIOMARKER_TOP_K_DEFAULT):
    """Predicted abundance vector from the top-k of a ranked list."""
    if index.abundance is None:
        raise ArgumentError("index has no abundance table")
    take = min(k, len(ranked.indices))
    return weighted_abundance(ranked.indices[:take], ranked.scores[:take], index.abundance)


@dataclass(frozen=True)
class PccReport:
    per_channel: dict  # channel -> mean PCC over valid regions (NaN if none)
    aggregate: float
    retained_channels: tuple[str, ...]
    skipped_pairs: int  # region/channel pairs dropped for zero variance


def pcc_evaluate(predictions, truths, region_ids, channels,
                 presence_threshold=PCC_PRESENCE_THRESHOLD):
    """Per-region Pearson between predicted and true abundance, aggregated.

    For each channel, the per-region PCC across patches is averaged over
    regions where the channel is present (any non-NaN truth); channels
    present in fewer than ``presence_threshold`` of regions are excluded
    from the aggregate.  Region/channel pairs with zero truth variance are
    skipped and counted.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if predictions.shape != truths.shape:
        raise ArgumentError("prediction and truth tables must have equal shapes")
    if predictions.shape[0] != len(region_ids):
        raise ArgumentError("region ids must align with table rows")
    if predictions.shape[1] != len(channels):
        raise ArgumentError("channel names must align with table columns")

    regions = sorted(set(region_ids))
    region_rows = {r: [i for i, rid in enumerate(region_ids) if rid == r] for r in regions}
    skipped = 0
    per_channel_values = {c: [] for c in channels}
    presence = {c: 0 for c in channels}
    for r in regions:
        rows = region_rows[r]
        for j, c in enumerate(channels):
            truth_col = truths[rows, j]
            pred_col = predictions[rows, j]
            valid = ~(np.isnan(truth_col) | np.isnan(pred_col))
            if not valid.any():
                continue
            presence[c] += 1
            if valid.sum() < 2:
                skipped += 1
                continue
            try:
                per_channel_values[c].append(stats.pearson(pred_col[valid], truth_col[valid]))
            except DegenerateStatisticsError:
                skipped += 1

    per_channel = {
        c: (float(np.mean(vals)) if vals else float("nan"))
        for c, vals in per_channel_values.items()
    }
    retained = tuple(
        c for c in channels
        if presence[c] / len(regions) >= presence_threshold and per_channel_values[c]
    )
    aggregate = float(np.mean([per_channel[c] for c in retained])) if retained else float("nan")
    return PccReport(per_channel, aggregate, retained, skipped)
