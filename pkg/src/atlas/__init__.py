"""Tri-modal tissue-patch alignment, retrieval and counterfactual analysis.

The package covers the post-encoder pipeline for co-registered H&E /
multiplexed-protein / clinical-text patch data: preprocessing and patch
description synthesis, contrastive projection-head training, exact
cross-modal retrieval with fusion scoring, downstream probing and
multiple-instance prediction, a shared statistics kernel, and
metadata-perturbation counterfactual analysis, plus snapshot persistence
and an HTTP query service.
"""

from . import (
    align,
    counterfactual,
    downstream,
    errors,
    ingest,
    preprocess,
    retrieval,
    service,
    stats,
    textgen,
)

__version__ = "0.1.0"

__all__ = [
    "align",
    "counterfactual",
    "downstream",
    "errors",
    "ingest",
    "preprocess",
    "retrieval",
    "service",
    "stats",
    "textgen",
    "__version__",
]
