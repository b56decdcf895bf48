"""Snapshot persistence and the HTTP query service, end to end."""

import json
import tempfile
import threading
import urllib.request
from pathlib import Path

import numpy as np

from atlas import retrieval, service
from atlas.ingest import ClinicalMetadata, EmbeddingMatrix

rng = np.random.default_rng(4)

rows = rng.standard_normal((120, 16))
rows /= np.linalg.norm(rows, axis=1, keepdims=True)
matrix = EmbeddingMatrix("MIF", rows.astype(np.float32),
                         tuple(f"g{i}" for i in range(120)))
gallery = retrieval.build_index(
    matrix,
    labels={"n_stage": tuple(["N0", "N1", "N2"][i % 3] for i in range(120))},
    abundance=rng.uniform(0, 255, size=(120, 4)),
    channels=("CD8", "PDL1", "Ki67", "PanCK"))

metadata = [ClinicalMetadata("lung", "lung cancer", "primary tumor",
                             t_stage="T3", n_stage="N1", m_stage="M0",
                             survival_status="Deceased", survival_months=25.0)
            for _ in range(5)]
queries = rows[:5] + 0.05 * rng.standard_normal((5, 16))
queries /= np.linalg.norm(queries, axis=1, keepdims=True)
bundle = service.ServiceBundle(gallery, tuple(f"q{i}" for i in range(5)),
                               queries, metadata)

# snapshots are checksummed; restore rejects any corruption
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "atlas.hki"
    service.snapshot(bundle, path)
    restored = service.restore(path)
    print(f"snapshot round trip: {restored.gallery.n} rows, "
          f"{len(restored.query_ids)} query patches")

server = service.serve(bundle, service.ServiceConfig(port=0))
port = server.server_address[1]
threading.Thread(target=server.serve_forever, daemon=True).start()


def get(path):
    with urllib.request.urlopen(f"http://127.0.0.1:{port}{path}") as resp:
        return json.loads(resp.read())


def post(path, payload):
    req = urllib.request.Request(
        f"http://127.0.0.1:{port}{path}", data=json.dumps(payload).encode(),
        headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req) as resp:
        return json.loads(resp.read())


print(f"GET /v1/health -> {get('/v1/health')}")
print(f"GET /v1/galleries -> rows {get('/v1/galleries')[0]['rows']}")

ranked = post("/v1/query", {"patch_id": "q0", "k": 5})
print(f"POST /v1/query q0 -> top ids {ranked['ids'][:3]}")

# null edit: both retrieval sets identical, all shifts exactly zero
null = post("/v1/counterfactual", {"query_ids": ["q0", "q1", "q2", "q3", "q4"],
                                   "edits": {}, "k": 10, "clusters": 2})
print(f"POST /v1/counterfactual (no edits) -> sets identical: "
      f"{null['control'] == null['counterfactual']}")

# a survival-status edit regenerates the metadata-only text and re-queries
edited = post("/v1/counterfactual", {"edits": {"survival_status": "Alive"},
                                     "k": 10, "clusters": 2})
print(f"POST /v1/counterfactual (Deceased -> Alive) -> run {edited['run_id']}")
print(f"  composition categories: "
      f"{[c['category'] for c in edited['composition']]}")
print(f"  cluster sizes: {edited['clusters']['sizes']}")

server.shutdown()
server.server_close()
