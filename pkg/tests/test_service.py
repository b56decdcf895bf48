"""Snapshot persistence and HTTP service tests."""

import json
import threading
import urllib.request
import zlib

import numpy as np
import pytest

from synthetic import planted_counterfactual_cohort

from atlas import retrieval, service, textgen
from atlas.errors import ServiceError, SnapshotError
from atlas.ingest import ClinicalMetadata, EmbeddingMatrix


def make_bundle(seed=0, n_gallery=60, n_queries=8, dim=16):
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((n_gallery, dim))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    matrix = EmbeddingMatrix("MIF", rows.astype(np.float32),
                             tuple(f"g{i}" for i in range(n_gallery)))
    abundance = rng.uniform(0, 255, size=(n_gallery, 4))
    gallery = retrieval.build_index(
        matrix,
        labels={"n_stage": tuple(["N0", "N1"][i % 2] for i in range(n_gallery))},
        abundance=abundance, channels=("CD8", "CD4", "PanCK", "Vimentin"),
        region_ids=tuple(f"r{i % 3}" for i in range(n_gallery)))
    query_he = rows[:n_queries] + 0.05 * rng.standard_normal((n_queries, dim))
    query_he /= np.linalg.norm(query_he, axis=1, keepdims=True)
    metadata = [ClinicalMetadata("breast", "breast cancer", "primary tumor",
                                 t_stage="T2", n_stage="N0", m_stage="M0", grade="G2")
                for _ in range(n_queries)]
    ids = tuple(f"q{i}" for i in range(n_queries))
    text = textgen.build_clinical_prefix(metadata[0])
    tvec = rng.standard_normal(dim)
    bundle = service.ServiceBundle(
        gallery, ids, query_he, metadata,
        text_vectors={text: tvec / np.linalg.norm(tvec)},
        thumbnails={"q0": service.abundance_thumbnail(np.arange(4.0))})
    return bundle


class TestPng:
    def test_valid_signature_and_decodable_idat(self):
        png = service.encode_png(np.arange(64, dtype=np.uint8).reshape(8, 8))
        assert png.startswith(b"\x89PNG\r\n\x1a\n")
        idat_start = png.index(b"IDAT") + 4
        idat_len = int.from_bytes(png[idat_start - 8:idat_start - 4], "big")
        raw = zlib.decompress(png[idat_start:idat_start + idat_len])
        assert len(raw) == 8 * 9  # filter byte + 8 pixels per row

    def test_rgb_shape(self):
        png = service.encode_png(np.zeros((4, 4, 3), dtype=np.uint8))
        assert png.startswith(b"\x89PNG")

    def test_abundance_thumbnail_deterministic(self):
        a = service.abundance_thumbnail(np.array([1.0, 2.0, 3.0]))
        b = service.abundance_thumbnail(np.array([1.0, 2.0, 3.0]))
        assert a == b


class TestSnapshot:
    def test_round_trip_rankings_identical(self, tmp_path):
        bundle = make_bundle()
        path = tmp_path / "atlas.hki"
        service.snapshot(bundle, path)
        restored = service.restore(path)
        rng = np.random.default_rng(1)
        for _ in range(100):
            q = rng.standard_normal(bundle.gallery.dim)
            a = retrieval.query(bundle.gallery, q, 20)
            b = retrieval.query(restored.gallery, q, 20)
            assert a.ids == b.ids
            np.testing.assert_array_equal(a.scores, b.scores)

    def test_truncated_file_fails_checksum(self, tmp_path):
        bundle = make_bundle()
        path = tmp_path / "atlas.hki"
        service.snapshot(bundle, path)
        data = path.read_bytes()
        path.write_bytes(data[:-10])
        with pytest.raises(SnapshotError, match="checksum|truncated"):
            service.restore(path)

    def test_corrupt_byte_fails_checksum(self, tmp_path):
        bundle = make_bundle()
        path = tmp_path / "atlas.hki"
        service.snapshot(bundle, path)
        data = bytearray(path.read_bytes())
        data[40] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(SnapshotError, match="checksum"):
            service.restore(path)

    def test_version_mismatch_migration_error(self, tmp_path):
        import hashlib
        import struct
        bundle = make_bundle()
        path = tmp_path / "atlas.hki"
        service.snapshot(bundle, path)
        data = bytearray(path.read_bytes()[:-32])
        struct.pack_into("<I", data, 4, 99)
        body = bytes(data)
        path.write_bytes(body + hashlib.sha256(body).digest())
        with pytest.raises(SnapshotError, match="migration"):
            service.restore(path)

    def test_metadata_and_texts_survive(self, tmp_path):
        bundle = make_bundle()
        path = tmp_path / "atlas.hki"
        service.snapshot(bundle, path)
        restored = service.restore(path)
        assert restored.query_metadata[0] == bundle.query_metadata[0]
        for text, vec in bundle.text_vectors.items():
            np.testing.assert_allclose(restored.text_vectors[text], vec, atol=1e-12)
        assert restored.thumbnails == bundle.thumbnails

    def test_empty_gallery_round_trip(self, tmp_path):
        matrix = EmbeddingMatrix("MIF", np.zeros((0, 8), dtype=np.float32), ())
        gallery = retrieval.build_index(matrix)
        bundle = service.ServiceBundle(gallery, (), np.zeros((0, 8)), [])
        path = tmp_path / "empty.hki"
        service.snapshot(bundle, path)
        restored = service.restore(path)
        assert restored.gallery.n == 0


class TestServiceHandlers:
    def test_health(self):
        svc = service.AtlasService(make_bundle())
        assert svc.health() == {"status": "ok", "index_rows": 60}

    def test_query_self_embedding_rank_one(self):
        bundle = make_bundle()
        svc = service.AtlasService(bundle)
        out = svc.query({"embedding": bundle.gallery.rows[5].tolist(), "k": 3})
        assert out["ids"][0] == "g5"
        assert float(out["scores"][0]) == pytest.approx(1.0, abs=1e-9)

    def test_counterfactual_empty_edits_identical_sets(self):
        svc = service.AtlasService(make_bundle())
        out = svc.run_counterfactual({"edits": {}, "k": 10})
        assert out["control"] == out["counterfactual"]
        for s in out["shift_strip"]["shifts"]:
            assert s["mean_shift"] in ("0", "-0")

    def test_counterfactual_artifacts_retrievable(self):
        svc = service.AtlasService(make_bundle())
        out = svc.run_counterfactual({"edits": {"n_stage": "N2"}, "k": 10})
        run_id = out["run_id"]
        bundle = svc.run_clusters(run_id)
        assert set(bundle["clusters"]["assignments"]) == set(out["query_ids"])
        assert bundle["cluster_shifts"] == out["cluster_shifts"]
        assert set(bundle["pca"]) == set(out["pca"])
        prototypes = svc.run_prototypes(run_id)
        assert all(isinstance(v, list) for v in prototypes.values())
        csv_text = svc.run_shift_csv(run_id)
        assert csv_text.splitlines()[0] == (
            "cluster,channel,mean_shift,percent_change,adjusted_p,significant")

    def test_unknown_run_rejected(self):
        svc = service.AtlasService(make_bundle())
        with pytest.raises(ServiceError):
            svc.run_clusters("nope")

    def test_csv_and_json_share_formatting(self):
        svc = service.AtlasService(make_bundle())
        out = svc.run_counterfactual({"edits": {"n_stage": "N2"}, "k": 10, "clusters": 2})
        csv_rows = svc.run_shift_csv(out["run_id"]).strip().splitlines()[1:]
        cells = {}
        for row in csv_rows:
            cluster, channel, mean_shift, pct, adj, sig = row.split(",")
            cells[(int(cluster), channel)] = (mean_shift, pct, adj)
        for report in svc.runs[out["run_id"]]["cluster_shifts"]:
            for entry in report["shifts"]:
                assert cells[(report["cluster"], entry["channel"])] == (
                    entry["mean_shift"], entry["percent_change"], entry["adjusted_p"])


class TestHttpServer:
    @pytest.fixture()
    def server(self):
        bundle = make_bundle()
        config = service.ServiceConfig(port=0)
        server = service.serve(bundle, config)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        yield server
        server.shutdown()
        server.server_close()

    def fetch(self, server, path, payload=None):
        port = server.server_address[1]
        url = f"http://127.0.0.1:{port}{path}"
        if payload is None:
            req = urllib.request.Request(url)
        else:
            req = urllib.request.Request(url, data=json.dumps(payload).encode(),
                                         headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req) as resp:
            return resp.status, resp.read(), dict(resp.headers)

    def test_health_endpoint(self, server):
        status, body, headers = self.fetch(server, "/v1/health")
        assert status == 200
        assert json.loads(body) == {"index_rows": 60, "status": "ok"}
        assert "X-Atlas-Timing-Ms" in headers

    def test_galleries_and_patch(self, server):
        status, body, _ = self.fetch(server, "/v1/galleries")
        assert status == 200
        assert json.loads(body)[0]["rows"] == 60
        status, body, _ = self.fetch(server, "/v1/patches/g3")
        assert json.loads(body)["labels"]["n_stage"] == "N1"

    def test_thumbnail_served_as_png(self, server):
        status, body, headers = self.fetch(server, "/v1/patches/q0/thumbnail.png")
        assert status == 200
        assert headers["Content-Type"] == "image/png"
        assert body.startswith(b"\x89PNG")

    def test_query_roundtrip(self, server):
        bundle = server.atlas_service.bundle
        status, body, _ = self.fetch(server, "/v1/query",
                                     {"embedding": bundle.gallery.rows[7].tolist(), "k": 5})
        assert status == 200
        assert json.loads(body)["ids"][0] == "g7"

    def test_repeated_requests_byte_identical(self, server):
        payload = {"edits": {"n_stage": "N1"}, "k": 8}
        _, body1, _ = self.fetch(server, "/v1/counterfactual", payload)
        _, body2, _ = self.fetch(server, "/v1/counterfactual", payload)
        assert body1 == body2

    def test_unknown_route_404(self, server):
        with pytest.raises(urllib.error.HTTPError) as err:
            self.fetch(server, "/v1/bogus")
        assert err.value.code == 404

    def test_bad_query_400(self, server):
        with pytest.raises(urllib.error.HTTPError) as err:
            self.fetch(server, "/v1/query", {"k": 3})
        assert err.value.code == 400


class TestPlantedThroughService:
    def test_planted_composition_shift_via_service(self):
        cohort = planted_counterfactual_cohort(seed=1)
        matrix = EmbeddingMatrix(
            "MIF", cohort["gallery"].astype(np.float32),
            tuple(f"g{i}" for i in range(len(cohort["gallery"]))))
        gallery = retrieval.build_index(
            matrix, labels={"n_stage": tuple(cohort["labels"])},
            abundance=cohort["abundance"],
            channels=tuple(f"B{j}" for j in range(cohort["abundance"].shape[1])))
        n_q = len(cohort["queries_he"])
        metadata = [ClinicalMetadata("breast", "breast cancer", "primary tumor",
                                     t_stage="T2", n_stage="N0", m_stage="M0")
                    for _ in range(n_q)]
        control_text = textgen.build_clinical_prefix(metadata[0])
        cf_meta, cf_text = textgen.perturb_metadata(metadata[0], {"n_stage": "N2"})
        bundle = service.ServiceBundle(
            gallery, tuple(f"q{i}" for i in range(n_q)), cohort["queries_he"], metadata,
            text_vectors={control_text: cohort["control_text"],
                          cf_text: cohort["counterfactual_text"]})
        svc = service.AtlasService(bundle)
        out = svc.run_counterfactual({"edits": {"n_stage": "N2"}, "k": 30,
                                      "clusters": 2, "label_column": "n_stage"})
        comp = {c["category"]: c for c in out["composition"]}
        assert comp["N2"]["significant"]
        assert float(comp["N2"]["mean_counterfactual"]) > float(comp["N2"]["mean_control"])
