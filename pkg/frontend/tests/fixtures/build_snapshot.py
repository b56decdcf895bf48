"""Build the large snapshot used by the explorer integration tests.

Usage: python3 build_snapshot.py OUT_PATH [N_ROWS] [DIM]
"""

import sys

import numpy as np

from atlas import retrieval, service, textgen
from atlas.ingest import ClinicalMetadata, EmbeddingMatrix


def main():
    out_path = sys.argv[1]
    n_rows = int(sys.argv[2]) if len(sys.argv) > 2 else 50_000
    dim = int(sys.argv[3]) if len(sys.argv) > 3 else 64
    n_queries = 60
    n_channels = 20

    rng = np.random.default_rng(99)
    rows = rng.standard_normal((n_rows, dim))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    matrix = EmbeddingMatrix("MIF", rows.astype(np.float32),
                             tuple(f"g{i}" for i in range(n_rows)))
    stages = ("N0", "N1", "N2")
    gallery = retrieval.build_index(
        matrix,
        labels={"n_stage": tuple(stages[i % 3] for i in range(n_rows))},
        abundance=rng.uniform(0, 255, size=(n_rows, n_channels)),
        channels=tuple(f"B{j}" for j in range(n_channels)),
    )

    queries = rows[:n_queries] + 0.2 * rng.standard_normal((n_queries, dim))
    queries /= np.linalg.norm(queries, axis=1, keepdims=True)
    metadata = [ClinicalMetadata("breast", "breast cancer", "primary tumor",
                                 t_stage="T2", n_stage="N0", m_stage="M0", grade="G2")
                for _ in range(n_queries)]
    control_text = textgen.build_clinical_prefix(metadata[0])
    _, edited_text = textgen.perturb_metadata(metadata[0], {"n_stage": "N2"})
    tvec_control = rng.standard_normal(dim)
    tvec_edited = rng.standard_normal(dim)
    bundle = service.ServiceBundle(
        gallery, tuple(f"q{i}" for i in range(n_queries)), queries, metadata,
        text_vectors={
            control_text: tvec_control / np.linalg.norm(tvec_control),
            edited_text: tvec_edited / np.linalg.norm(tvec_edited),
        },
    )
    service.snapshot(bundle, out_path)
    print(f"snapshot: {n_rows} rows x {dim} dims -> {out_path}")


if __name__ == "__main__":
    main()
