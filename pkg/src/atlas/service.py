"""Read-only HTTP query service and index snapshot persistence.

A service bundle holds the mIF gallery (embeddings, labels, abundance),
the known query patches (H&E embeddings plus clinical metadata and
thumbnails) and a table of known text embeddings; everything is packed
into a checksummed snapshot file.  The server exposes versioned endpoints
over an immutable in-memory bundle; responses are a pure function of
(snapshot, request) with timing reported in a header so identical requests
produce byte-identical bodies.
"""

from __future__ import annotations

import hashlib
import json
import signal
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from . import counterfactual as cf
from . import retrieval, textgen
from .errors import ArgumentError, ServiceError, SnapshotError
from .ingest import ClinicalMetadata

SNAPSHOT_MAGIC = b"HKIX"
SNAPSHOT_VERSION = 1
ALPHA_INFERENCE_DEFAULT = 0.8
ALPHA_COUNTERFACTUAL_DEFAULT = 0.6
K_DEFAULT = 50
SHIFT_VALUE_FORMAT = ".6g"  # frozen formatting rule shared by JSON and CSV


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8620
    snapshot_path: str | None = None
    alpha_inference: float = ALPHA_INFERENCE_DEFAULT
    alpha_counterfactual: float = ALPHA_COUNTERFACTUAL_DEFAULT
    k_default: int = K_DEFAULT
    cors_origins: tuple = ("*",)

    def __post_init__(self):
        for alpha in (self.alpha_inference, self.alpha_counterfactual):
            if not (0.0 <= alpha <= 1.0):
                raise ArgumentError("alpha defaults must lie in [0, 1]")


# ---------------------------------------------------------------------------
# PNG thumbnails (grayscale or RGB, 8-bit)
# ---------------------------------------------------------------------------

def encode_png(array):
    """Minimal PNG encoder for uint8 arrays of shape (H, W) or (H, W, 3)."""
    array = np.asarray(array, dtype=np.uint8)
    if array.ndim == 2:
        color_type, planes = 0, 1
    elif array.ndim == 3 and array.shape[2] == 3:
        color_type, planes = 2, 3
    else:
        raise ArgumentError("thumbnail must be (H, W) or (H, W, 3) uint8")
    height, width = array.shape[:2]

    def chunk(tag, payload):
        data = tag + payload
        return struct.pack(">I", len(payload)) + data + struct.pack(
            ">I", zlib.crc32(data) & 0xFFFFFFFF)

    header = struct.pack(">IIBBBBB", width, height, 8, color_type, 0, 0, 0)
    raw = b"".join(
        b"\x00" + array[y].tobytes() for y in range(height)
    )
    return (b"\x89PNG\r\n\x1a\n"
            + chunk(b"IHDR", header)
            + chunk(b"IDAT", zlib.compress(raw, 9))
            + chunk(b"IEND", b""))


def abundance_thumbnail(mu, size=24):
    """Deterministic placeholder thumbnail from a patch's abundance vector."""
    mu = np.asarray(mu, dtype=np.float64)
    if mu.size == 0:
        return encode_png(np.zeros((size, size), dtype=np.uint8))
    tiles = np.resize(mu, size * size).reshape(size, size)
    lo, hi = tiles.min(), tiles.max()
    scale = (tiles - lo) / (hi - lo) if hi > lo else np.zeros_like(tiles)
    return encode_png(np.floor(255.0 * scale + 0.5).astype(np.uint8))


# ---------------------------------------------------------------------------
# Service bundle and snapshot container
# ---------------------------------------------------------------------------

@dataclass
class ServiceBundle:
    gallery: retrieval.EmbeddingIndex
    query_ids: tuple
    query_he: np.ndarray  # (n_queries, dim) unit rows
    query_metadata: list  # ClinicalMetadata per query patch
    text_vectors: dict = field(default_factory=dict)  # text -> unit vector
    thumbnails: dict = field(default_factory=dict)  # patch id -> PNG bytes

    def __post_init__(self):
        self.query_he = np.asarray(self.query_he, dtype=np.float64)
        if self.query_he.shape[0] != len(self.query_ids):
            raise ArgumentError("query ids must align with query embeddings")
        if len(self.query_metadata) != len(self.query_ids):
            raise ArgumentError("query metadata must align with query ids")
        self._query_index = {qid: i for i, qid in enumerate(self.query_ids)}

    def query_row(self, patch_id):
        if patch_id not in self._query_index:
            raise ServiceError(f"unknown patch id {patch_id!r}")
        return self._query_index[patch_id]

    def embed_text(self, text):
        """Known texts come from the table; unknown texts hash to a stable
        unit vector so the service stays total at the provider boundary."""
        if text in self.text_vectors:
            return np.asarray(self.text_vectors[text], dtype=np.float64)
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        key = int.from_bytes(digest[:8], "little")
        rng = np.random.Generator(np.random.Philox(key=np.uint64(key)))
        vec = rng.standard_normal(self.gallery.dim)
        return vec / np.linalg.norm(vec)


def snapshot(bundle, path):
    """Write a checksummed snapshot; restore() is its exact inverse."""
    gallery = bundle.gallery
    meta = {
        "modality": gallery.modality,
        "ids": list(gallery.ids),
        "labels": {k: list(v) for k, v in gallery.labels.items()},
        "channels": list(gallery.channels) if gallery.channels else None,
        "region_ids": list(gallery.region_ids) if gallery.region_ids else None,
        "gallery_shape": list(gallery.rows.shape),
        "has_abundance": gallery.abundance is not None,
        "query_ids": list(bundle.query_ids),
        "query_shape": list(bundle.query_he.shape),
        "query_metadata": [m.to_json_dict() for m in bundle.query_metadata],
        "texts": sorted(bundle.text_vectors),
        "thumbnail_ids": sorted(bundle.thumbnails),
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = bytearray()
    body += SNAPSHOT_MAGIC
    body += struct.pack("<IQ", SNAPSHOT_VERSION, len(blob))
    body += blob
    body += np.ascontiguousarray(gallery.rows, dtype="<f8").tobytes()
    if gallery.abundance is not None:
        body += np.ascontiguousarray(gallery.abundance, dtype="<f8").tobytes()
    body += np.ascontiguousarray(bundle.query_he, dtype="<f8").tobytes()
    for text in meta["texts"]:
        body += np.ascontiguousarray(bundle.text_vectors[text], dtype="<f8").tobytes()
    for pid in meta["thumbnail_ids"]:
        png = bundle.thumbnails[pid]
        body += struct.pack("<Q", len(png)) + png
    digest = hashlib.sha256(bytes(body)).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(body) + digest)


def restore(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 48:
        raise SnapshotError("snapshot truncated")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise SnapshotError("snapshot checksum mismatch")
    if body[:4] != SNAPSHOT_MAGIC:
        raise SnapshotError("bad snapshot magic")
    version, blob_len = struct.unpack_from("<IQ", body, 4)
    if version != SNAPSHOT_VERSION:
        raise SnapshotError(
            f"snapshot version {version} needs migration to {SNAPSHOT_VERSION}")
    offset = 16
    meta = json.loads(body[offset:offset + blob_len].decode("utf-8"))
    offset += blob_len

    def take(count):
        nonlocal offset
        out = np.frombuffer(body, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        return out

    g_n, g_d = meta["gallery_shape"]
    rows = take(g_n * g_d).reshape(g_n, g_d)
    abundance = None
    if meta["has_abundance"]:
        abundance = take(g_n * len(meta["channels"])).reshape(g_n, -1)
    q_n, q_d = meta["query_shape"]
    query_he = take(q_n * q_d).reshape(q_n, q_d)
    text_vectors = {}
    for text in meta["texts"]:
        text_vectors[text] = take(g_d)
    thumbnails = {}
    for pid in meta["thumbnail_ids"]:
        (png_len,) = struct.unpack_from("<Q", body, offset)
        offset += 8
        thumbnails[pid] = bytes(body[offset:offset + png_len])
        offset += png_len

    gallery = retrieval.EmbeddingIndex(
        meta["modality"], rows, tuple(meta["ids"]),
        labels={k: tuple(v) for k, v in meta["labels"].items()} or None,
        abundance=abundance,
        channels=tuple(meta["channels"]) if meta["channels"] else None,
        region_ids=tuple(meta["region_ids"]) if meta["region_ids"] else None,
        assume_normalized=True,
    )
    metadata = [ClinicalMetadata.from_json_dict(d) for d in meta["query_metadata"]]
    return ServiceBundle(gallery, tuple(meta["query_ids"]), query_he, metadata,
                         text_vectors, thumbnails)


# ---------------------------------------------------------------------------
# Request handling (transport-independent)
# ---------------------------------------------------------------------------

def _fmt(value):
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return ""
    return format(value, SHIFT_VALUE_FORMAT)


class AtlasService:
    """Pure request -> response mapping over an immutable bundle."""

    def __init__(self, bundle, config=None):
        self.bundle = bundle
        self.config = config or ServiceConfig()
        self.runs = {}
        self._lock = threading.Lock()

    # -- GET ---------------------------------------------------------------

    def health(self):
        return {"status": "ok", "index_rows": self.bundle.gallery.n}

    def galleries(self):
        g = self.bundle.gallery
        return [{
            "modality": g.modality,
            "rows": g.n,
            "dim": g.dim,
            "channels": list(g.channels) if g.channels else [],
            "label_columns": sorted(g.labels),
            "query_patches": len(self.bundle.query_ids),
        }]

    def patch(self, patch_id):
        bundle = self.bundle
        g = bundle.gallery
        if patch_id in bundle._query_index:
            i = bundle.query_row(patch_id)
            meta = bundle.query_metadata[i]
            return {
                "id": patch_id,
                "kind": "query",
                "metadata": meta.to_json_dict(),
                "metadata_text": textgen.build_clinical_prefix(meta),
                "thumbnail": f"/v1/patches/{patch_id}/thumbnail.png",
            }
        try:
            row = g.index_of(patch_id)
        except KeyError:
            raise ServiceError(f"unknown patch id {patch_id!r}")
        abundance = {}
        if g.abundance is not None:
            abundance = {c: _fmt(v) for c, v in zip(g.channels, g.abundance[row])}
        return {
            "id": patch_id,
            "kind": "gallery",
            "labels": {k: v[row] for k, v in g.labels.items()},
            "abundance": abundance,
            "thumbnail": f"/v1/patches/{patch_id}/thumbnail.png",
        }

    def thumbnail(self, patch_id):
        if patch_id in self.bundle.thumbnails:
            return self.bundle.thumbnails[patch_id]
        g = self.bundle.gallery
        try:
            row = g.index_of(patch_id)
        except KeyError:
            raise ServiceError(f"no thumbnail for {patch_id!r}")
        if g.abundance is None:
            raise ServiceError(f"no thumbnail for {patch_id!r}")
        return abundance_thumbnail(g.abundance[row])

    # -- POST ---------------------------------------------------------------

    def query(self, payload):
        g = self.bundle.gallery
        k = int(payload.get("k", self.config.k_default))
        if "patch_id" in payload:
            row = self.bundle.query_row(payload["patch_id"])
            vec = self.bundle.query_he[row]
        elif "embedding" in payload:
            vec = np.asarray(payload["embedding"], dtype=np.float64)
        else:
            raise ServiceError("query needs 'patch_id' or 'embedding'")
        if "text" in payload or "text_embedding" in payload:
            alpha = float(payload.get("alpha", self.config.alpha_inference))
            tvec = (np.asarray(payload["text_embedding"], dtype=np.float64)
                    if "text_embedding" in payload
                    else self.bundle.embed_text(payload["text"]))
            ranked = retrieval.fuse_scores(vec, tvec, g, alpha, k)
        else:
            ranked = retrieval.query(g, vec, k)
        rows = ranked.indices
        out = {
            "ids": list(ranked.ids),
            "scores": [_fmt(s) for s in ranked.scores],
            "labels": {col: [g.labels[col][i] for i in rows] for col in g.labels},
        }
        if g.abundance is not None:
            out["abundance"] = [[_fmt(v) for v in g.abundance[i]] for i in rows]
        return out

    def run_counterfactual(self, payload):
        bundle = self.bundle
        g = bundle.gallery
        query_ids = payload.get("query_ids") or list(bundle.query_ids)
        rows = [bundle.query_row(qid) for qid in query_ids]
        if not rows:
            raise ServiceError("no query patches selected")
        edits = payload.get("edits", {}) or {}
        alpha = float(payload.get("alpha", self.config.alpha_counterfactual))
        k = int(payload.get("k", self.config.k_default))
        n_clusters = int(payload.get("clusters", cf.KMEANS_CLUSTERS_DEFAULT))

        base_meta = bundle.query_metadata[rows[0]]
        control_text = textgen.build_clinical_prefix(base_meta)
        if edits:
            _, cf_text = textgen.perturb_metadata(base_meta, edits)
        else:
            cf_text = control_text
        run = cf.run_pair(bundle.query_he[rows], bundle.embed_text(control_text),
                          bundle.embed_text(cf_text), g, alpha=alpha, k=k,
                          query_ids=tuple(query_ids))

        label_col = payload.get("label_column", sorted(g.labels)[0])
        labels = list(g.labels[label_col])
        categories = sorted({v for v in labels if v is not None})
        composition = cf.composition_shift(run, labels, categories)

        n_clusters = max(1, min(n_clusters, len(rows)))
        model = cf.kmeans_embed(bundle.query_he[rows], k=n_clusters,
                                seed=int(payload.get("seed", 0)))
        prototypes = cf.select_prototypes(model, bundle.query_he[rows], query_ids)
        reports = cf.cluster_shift_test(run, model.assignments, g.abundance, g.channels)
        overall = cf.cluster_shift_test(run, np.zeros(len(rows), dtype=int),
                                        g.abundance, g.channels, min_cluster=1)[0]
        _, _, shifts = cf.shift_matrix(run, g.abundance)
        pca_by_cluster = {}
        for c in range(n_clusters):
            members = np.flatnonzero(model.assignments == c)
            pca = cf.pca_shifts(shifts[members], channels=g.channels)
            if pca.status != "ok":
                pca_by_cluster[str(c)] = {"status": pca.status}
                continue
            kept = members[pca.kept_rows]
            pca_by_cluster[str(c)] = {
                "status": "ok",
                "query_ids": [query_ids[i] for i in kept],
                "scores": [[_fmt(a), _fmt(b)] for a, b in pca.scores],
                "loadings": {name: [_fmt(a), _fmt(b)]
                             for name, (a, b) in zip(pca.kept_channels, pca.loadings)},
                "explained": [_fmt(v) for v in pca.explained],
            }

        run_id = "run" + hashlib.sha256(json.dumps(
            {"q": query_ids, "e": edits, "a": alpha, "k": k, "col": label_col,
             "clusters": n_clusters}, sort_keys=True).encode()).hexdigest()[:12]
        artifacts = {
            "run_id": run_id,
            "alpha": alpha,
            "k": run.k,
            "label_column": label_col,
            "edits": edits,
            "clusters": {
                "assignments": {qid: int(c) for qid, c in zip(query_ids, model.assignments)},
                "sizes": {str(c): int(np.sum(model.assignments == c))
                          for c in range(n_clusters)},
            },
            "prototypes": {str(c): ids for c, ids in prototypes.items()},
            "cluster_shifts": [_report_dict(r) for r in reports],
            "pca": pca_by_cluster,
        }
        with self._lock:
            self.runs[run_id] = artifacts

        return {
            "run_id": run_id,
            "query_ids": list(query_ids),
            "control": _sets_dict(run.control_indices, run.control_scores, g),
            "counterfactual": _sets_dict(run.cf_indices, run.cf_scores, g),
            "composition": [{
                "category": s.category,
                "mean_control": _fmt(s.mean_control),
                "mean_counterfactual": _fmt(s.mean_counterfactual),
                "adjusted_p": _fmt(s.adjusted_p),
                "significant": s.significant,
            } for s in composition],
            "shift_strip": _report_dict(overall),
            "clusters": artifacts["clusters"],
            "cluster_shifts": artifacts["cluster_shifts"],
            "prototypes": artifacts["prototypes"],
            "pca": artifacts["pca"],
        }

    # -- run artifact lookups ------------------------------------------------

    def run_clusters(self, run_id):
        artifacts = self._artifact(run_id)
        return {
            "clusters": artifacts["clusters"],
            "cluster_shifts": artifacts["cluster_shifts"],
            "pca": artifacts["pca"],
        }

    def run_prototypes(self, run_id):
        return self._artifact(run_id)["prototypes"]

    def run_shift_csv(self, run_id):
        artifacts = self._artifact(run_id)
        lines = ["cluster,channel,mean_shift,percent_change,adjusted_p,significant"]
        for report in artifacts["cluster_shifts"]:
            for entry in report["shifts"]:
                lines.append(",".join([
                    str(report["cluster"]), entry["channel"], entry["mean_shift"],
                    entry["percent_change"], entry["adjusted_p"],
                    "1" if entry["significant"] else "0",
                ]))
        return "\n".join(lines) + "\n"

    def _artifact(self, run_id):
        with self._lock:
            if run_id not in self.runs:
                raise ServiceError(f"unknown run {run_id!r}")
            return self.runs[run_id]


def _sets_dict(indices, scores, gallery):
    return {
        "ids": [[gallery.ids[j] for j in row] for row in indices],
        "scores": [[_fmt(v) for v in row] for row in scores],
    }


def _report_dict(report):
    return {
        "cluster": report.cluster,
        "n_queries": report.n_queries,
        "status": report.status,
        "shifts": [{
            "channel": s.channel,
            "mean_shift": _fmt(s.mean_shift),
            "percent_change": _fmt(s.percent_change),
            "adjusted_p": _fmt(s.adjusted_p),
            "significant": s.significant,
        } for s in report.shifts],
    }


# ---------------------------------------------------------------------------
# HTTP layer
# ---------------------------------------------------------------------------

def make_handler(service):
    cors = service.config.cors_origins

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, *args):
            pass

        def _send(self, status, body, content_type="application/json"):
            payload = body if isinstance(body, bytes) else body.encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(payload)))
            if cors:
                self.send_header("Access-Control-Allow-Origin", cors[0])
                self.send_header("Access-Control-Allow-Headers", "Content-Type")
                self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("X-Atlas-Timing-Ms", f"{self._elapsed_ms():.3f}")
            self.end_headers()
            self.wfile.write(payload)

        def _elapsed_ms(self):
            return (time.perf_counter() - self._t0) * 1000.0

        def _send_json(self, obj, status=200):
            self._send(status, json.dumps(obj, sort_keys=True))

        def _send_error(self, status, message):
            self._send_json({"error": message}, status=status)

        def do_OPTIONS(self):
            self._t0 = time.perf_counter()
            self._send(204, b"")

        def do_GET(self):
            self._t0 = time.perf_counter()
            try:
                parts = self.path.strip("/").split("/")
                if parts[:2] == ["v1", "health"]:
                    self._send_json(service.health())
                elif parts[:2] == ["v1", "galleries"]:
                    self._send_json(service.galleries())
                elif parts[0] == "v1" and parts[1] == "patches" and len(parts) == 3:
                    self._send_json(service.patch(parts[2]))
                elif (parts[0] == "v1" and parts[1] == "patches" and len(parts) == 4
                      and parts[3] == "thumbnail.png"):
                    self._send(200, service.thumbnail(parts[2]), content_type="image/png")
                elif parts[0] == "v1" and parts[1] == "clusters" and len(parts) == 3:
                    self._send_json(service.run_clusters(parts[2]))
                elif parts[0] == "v1" and parts[1] == "prototypes" and len(parts) == 3:
                    self._send_json(service.run_prototypes(parts[2]))
                elif (parts[0] == "v1" and parts[1] == "runs" and len(parts) == 4
                      and parts[3] == "shifts.csv"):
                    self._send(200, service.run_shift_csv(parts[2]), content_type="text/csv")
                else:
                    self._send_error(404, f"no route for {self.path}")
            except ServiceError as exc:
                self._send_error(404, str(exc))
            except Exception as exc:  # pragma: no cover - defensive
                self._send_error(500, f"{type(exc).__name__}: {exc}")

        def do_POST(self):
            self._t0 = time.perf_counter()
            try:
                length = int(self.headers.get("Content-Length", 0))
                payload = json.loads(self.rfile.read(length) or b"{}")
                parts = self.path.strip("/").split("/")
                if parts[:2] == ["v1", "query"]:
                    self._send_json(service.query(payload))
                elif parts[:2] == ["v1", "counterfactual"]:
                    self._send_json(service.run_counterfactual(payload))
                else:
                    self._send_error(404, f"no route for {self.path}")
            except ServiceError as exc:
                self._send_error(400, str(exc))
            except (json.JSONDecodeError, ArgumentError, ValueError) as exc:
                self._send_error(400, str(exc))
            except Exception as exc:  # pragma: no cover - defensive
                self._send_error(500, f"{type(exc).__name__}: {exc}")

    return Handler


def serve(bundle, config, install_signal_handlers=False):
    """Build a threading HTTP server bound to the config address.

    The caller runs serve_forever(); with install_signal_handlers set,
    SIGINT/SIGTERM trigger a graceful shutdown.
    """
    service = AtlasService(bundle, config)
    server = ThreadingHTTPServer((config.host, config.port), make_handler(service))
    server.atlas_service = service
    if install_signal_handlers:
        def _stop(signum, frame):
            threading.Thread(target=server.shutdown, daemon=True).start()
        signal.signal(signal.SIGINT, _stop)
        signal.signal(signal.SIGTERM, _stop)
    return server
