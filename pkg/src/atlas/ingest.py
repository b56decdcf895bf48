"""Data model, manifest and embedding-container I/O, splits, synthesis.

Manifests are UTF-8 line-delimited JSON records (``*.hkm``).  Embedding
matrices live in a compact binary container (``*.hke``) with a fixed
24-byte header so round-trips are bit-exact and testable.  The synthetic
cohort generator stands in for the pretrained encoders at desk scale: all
three modality feature matrices are noisy views of one shared latent
vector per patch, and the clinical metadata is a deterministic function of
the same latent coordinates, so planted structure is recoverable by the
rest of the pipeline.
"""

from __future__ import annotations

import io
import json
import re
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ArgumentError, FormatError, IntegrityError, ManifestError

MODALITIES = ("HE", "MIF", "TXT")
_MODALITY_CODE = {"HE": 0, "MIF": 1, "TXT": 2}
_MODALITY_NAME = {v: k for k, v in _MODALITY_CODE.items()}

EMBEDDING_MAGIC = b"HKEM"
EMBEDDING_VERSION = 1
# magic(4) version(u32) modality(u8) pad(3) dim(u32) count(u64) = 24 bytes
_HEADER = struct.Struct("<4sIB3xIQ")

_STAGE_PATTERNS = {"t_stage": r"T\w+", "n_stage": r"N\w+", "m_stage": r"M\w+"}

SURVIVAL_STATUSES = ("Alive", "Deceased")


@dataclass(frozen=True)
class ClinicalMetadata:
    """Patient-level clinical context attached to a tissue slice.

    Optional fields are None when absent; absence is meaningful (the text
    generator distinguishes "absent" from "unknown") and serializes as an
    explicit JSON null.
    """

    organ_type: str
    disease: str
    tissue_type: str
    t_stage: str | None = None
    n_stage: str | None = None
    m_stage: str | None = None
    grade: str | None = None
    survival_status: str | None = None
    survival_months: float | None = None
    treatment_response: bool | None = None
    annotation: str | None = None

    def __post_init__(self):
        if self.survival_months is not None:
            if self.survival_status is None:
                raise ArgumentError("survival_months requires survival_status")
            if self.survival_months < 0:
                raise ArgumentError("survival_months must be non-negative")
        if self.survival_status is not None and self.survival_status not in SURVIVAL_STATUSES:
            raise ArgumentError(f"survival_status must be one of {SURVIVAL_STATUSES}")
        for name, pattern in _STAGE_PATTERNS.items():
            value = getattr(self, name)
            if value is not None and re.fullmatch(pattern, value) is None:
                raise ArgumentError(f"{name} value {value!r} does not match {pattern}")

    def to_json_dict(self):
        return {
            "organ_type": self.organ_type,
            "disease": self.disease,
            "tissue_type": self.tissue_type,
            "t_stage": self.t_stage,
            "n_stage": self.n_stage,
            "m_stage": self.m_stage,
            "grade": self.grade,
            "survival_status": self.survival_status,
            "survival_months": self.survival_months,
            "treatment_response": self.treatment_response,
            "annotation": self.annotation,
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(**{k: d.get(k) for k in cls.__dataclass_fields__})

    def edited(self, **edits):
        unknown = set(edits) - set(self.__dataclass_fields__)
        if unknown:
            raise ArgumentError(f"unknown metadata fields: {sorted(unknown)}")
        return replace(self, **edits)


@dataclass(frozen=True)
class PatchCoord:
    """Square pixel window; right/top bounds are exclusive."""

    x_left: int
    x_right: int
    y_bottom: int
    y_top: int

    def __post_init__(self):
        if self.x_right - self.x_left != self.y_top - self.y_bottom:
            raise ArgumentError("patch window must be square")
        if self.x_left < 0 or self.y_bottom < 0:
            raise ArgumentError("patch window extends past the image origin")

    @property
    def size(self):
        return self.x_right - self.x_left


@dataclass(frozen=True)
class SliceRecord:
    slice_id: str
    patient_id: str
    channel_names: tuple[str, ...]
    metadata: ClinicalMetadata
    has_he: bool = True
    has_text: bool = True

    def __post_init__(self):
        if len(set(self.channel_names)) != len(self.channel_names):
            raise ArgumentError(f"slice {self.slice_id}: duplicate channel names")


@dataclass(frozen=True, eq=False)
class PatchRecord:
    patch_id: str
    slice_id: str
    coord: PatchCoord
    mu: np.ndarray  # per-channel mean abundance, 0-255 scale
    text: str = ""
    metadata_text: str = ""

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))

    def __eq__(self, other):
        if not isinstance(other, PatchRecord):
            return NotImplemented
        return (self.patch_id == other.patch_id and self.slice_id == other.slice_id
                and self.coord == other.coord and np.array_equal(self.mu, other.mu)
                and self.text == other.text and self.metadata_text == other.metadata_text)

    def __hash__(self):
        return hash((self.patch_id, self.slice_id, self.coord))


@dataclass(frozen=True)
class Dataset:
    """Immutable bundle of slice and patch records."""

    slices: tuple[SliceRecord, ...]
    patches: tuple[PatchRecord, ...]

    def slice_by_id(self, slice_id):
        for s in self.slices:
            if s.slice_id == slice_id:
                return s
        raise KeyError(slice_id)

    def patient_ids(self):
        return sorted({s.patient_id for s in self.slices})

    def patches_of(self, slice_id):
        return [p for p in self.patches if p.slice_id == slice_id]


@dataclass(frozen=True)
class EmbeddingMatrix:
    modality: str
    rows: np.ndarray  # N x dim, float32
    ids: tuple[str, ...]

    def __post_init__(self):
        rows = np.ascontiguousarray(self.rows, dtype=np.float32)
        if rows.ndim != 2:
            raise ArgumentError("rows must be a 2-D matrix")
        if rows.shape[0] != len(self.ids):
            raise ArgumentError("row count does not match id count")
        if self.modality not in MODALITIES:
            raise ArgumentError(f"modality must be one of {MODALITIES}")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def dim(self):
        return self.rows.shape[1]

    def normalized(self):
        """Copy with rows scaled to unit L2 norm (zero rows are left zero)."""
        norms = np.linalg.norm(self.rows.astype(np.float64), axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        return EmbeddingMatrix(self.modality, (self.rows / norms).astype(np.float32), self.ids)


# ---------------------------------------------------------------------------
# Manifest I/O (*.hkm)
# ---------------------------------------------------------------------------

def _parse_slice(obj, line_no):
    try:
        metadata = ClinicalMetadata.from_json_dict(obj["metadata"])
        return SliceRecord(
            slice_id=obj["slice_id"],
            patient_id=obj["patient_id"],
            channel_names=tuple(obj["channels"]),
            metadata=metadata,
            has_he=bool(obj.get("has_he", True)),
            has_text=bool(obj.get("has_text", True)),
        )
    except (KeyError, TypeError, ArgumentError) as exc:
        raise ManifestError(line_no, f"bad slice record: {exc}") from exc


def _parse_patch(obj, line_no):
    try:
        coord = PatchCoord(*obj["coord"])
        return PatchRecord(
            patch_id=obj["patch_id"],
            slice_id=obj["slice_id"],
            coord=coord,
            mu=np.asarray(obj["mu"], dtype=float),
            text=obj.get("text", ""),
            metadata_text=obj.get("metadata_text", ""),
        )
    except (KeyError, TypeError, ArgumentError) as exc:
        raise ManifestError(line_no, f"bad patch record: {exc}") from exc


def load_manifest(path):
    """Parse a line-delimited manifest into a validated Dataset."""
    slices, patches = [], []
    slice_ids, patch_ids = set(), set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(line_no, f"invalid JSON: {exc.msg}") from exc
            kind = obj.get("kind")
            if kind == "slice":
                record = _parse_slice(obj, line_no)
                if record.slice_id in slice_ids:
                    raise ManifestError(line_no, f"duplicate slice_id {record.slice_id!r}")
                slice_ids.add(record.slice_id)
                slices.append(record)
            elif kind == "patch":
                record = _parse_patch(obj, line_no)
                if record.patch_id in patch_ids:
                    raise ManifestError(line_no, f"duplicate patch_id {record.patch_id!r}")
                patch_ids.add(record.patch_id)
                patches.append(record)
            else:
                raise ManifestError(line_no, f"unknown record kind {kind!r}")
    for p in patches:
        if p.slice_id not in slice_ids:
            raise IntegrityError(f"patch {p.patch_id!r} references unknown slice {p.slice_id!r}")
    for s in slices:
        n_channels = len(s.channel_names)
        for p in patches:
            if p.slice_id == s.slice_id and p.mu.shape != (n_channels,):
                raise IntegrityError(
                    f"patch {p.patch_id!r} has {p.mu.shape[0]} channel means, "
                    f"slice {s.slice_id!r} has {n_channels} channels"
                )
    return Dataset(tuple(slices), tuple(patches))


def write_manifest(dataset, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in dataset.slices:
            fh.write(json.dumps({
                "kind": "slice",
                "slice_id": s.slice_id,
                "patient_id": s.patient_id,
                "channels": list(s.channel_names),
                "metadata": s.metadata.to_json_dict(),
                "has_he": s.has_he,
                "has_text": s.has_text,
            }, sort_keys=True) + "\n")
        for p in dataset.patches:
            fh.write(json.dumps({
                "kind": "patch",
                "patch_id": p.patch_id,
                "slice_id": p.slice_id,
                "coord": [p.coord.x_left, p.coord.x_right, p.coord.y_bottom, p.coord.y_top],
                "mu": [float(v) for v in p.mu],
                "text": p.text,
                "metadata_text": p.metadata_text,
            }, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Patient-level splitting
# ---------------------------------------------------------------------------

def split_patients(dataset, test_fraction, seed):
    """Partition a dataset into train/test with no patient in both sides.

    The test patient count is round(test_fraction * n_patients), half-up.
    Deterministic given the seed.
    """
    if not (0.0 < test_fraction < 1.0):
        raise ArgumentError("test_fraction must lie strictly inside (0, 1)")
    patients = dataset.patient_ids()
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    order = rng.permutation(len(patients))
    n_test = int(np.floor(test_fraction * len(patients) + 0.5))
    test_patients = {patients[i] for i in order[:n_test]}

    def subset(selector):
        slices = tuple(s for s in dataset.slices if selector(s.patient_id))
        kept = {s.slice_id for s in slices}
        patches = tuple(p for p in dataset.patches if p.slice_id in kept)
        return Dataset(slices, patches)

    return subset(lambda pid: pid not in test_patients), subset(lambda pid: pid in test_patients)


# ---------------------------------------------------------------------------
# Embedding container I/O (*.hke)
# ---------------------------------------------------------------------------

def write_embeddings(matrix, path_or_file):
    """Serialize an EmbeddingMatrix; payload is row-major little-endian f32.

    Patch ids are not stored in the container (they live in the manifest or
    snapshot); read_embeddings therefore returns synthetic row ids.
    """
    if matrix.dim <= 0:
        raise ArgumentError("dim must be positive")
    header = _HEADER.pack(
        EMBEDDING_MAGIC,
        EMBEDDING_VERSION,
        _MODALITY_CODE[matrix.modality],
        matrix.dim,
        matrix.rows.shape[0],
    )
    payload = np.ascontiguousarray(matrix.rows, dtype="<f4").tobytes()
    if hasattr(path_or_file, "write"):
        path_or_file.write(header + payload)
    else:
        with open(path_or_file, "wb") as fh:
            fh.write(header + payload)


def read_embeddings(path_or_file, ids=None):
    if hasattr(path_or_file, "read"):
        data = path_or_file.read()
    else:
        with open(path_or_file, "rb") as fh:
            data = fh.read()
    if len(data) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, modality_code, dim, count = _HEADER.unpack_from(data)
    if magic != EMBEDDING_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != EMBEDDING_VERSION:
        raise FormatError(f"unsupported container version {version}")
    if modality_code not in _MODALITY_NAME:
        raise FormatError(f"unknown modality code {modality_code}")
    if dim == 0:
        raise FormatError("dim must be positive")
    expected = _HEADER.size + 4 * dim * count
    if len(data) != expected:
        raise FormatError(f"payload length {len(data) - _HEADER.size} does not match "
                          f"dim={dim} count={count}")
    rows = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(count, dim)
    if ids is None:
        ids = tuple(f"row{i}" for i in range(count))
    return EmbeddingMatrix(_MODALITY_NAME[modality_code], rows.copy(), tuple(ids))


def embeddings_to_bytes(matrix):
    buf = io.BytesIO()
    write_embeddings(matrix, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Synthetic cohort generation
# ---------------------------------------------------------------------------

DEFAULT_CHANNELS = (
    "CD8", "CD4", "CD20", "CD68", "PanCK", "Vimentin",
    "FoxP3", "PDL1", "Ki67", "CD31", "SMA", "HLA-DR",
)

_ORGANS = ("breast", "lung", "colon", "kidney", "liver")
_DISEASES = ("breast cancer", "lung cancer", "colon cancer", "kidney cancer", "liver cancer")
_TISSUES = ("primary tumor", "normal", "metastatic tumor")
_T_STAGES = ("T1", "T2", "T3", "T4")
_N_STAGES = ("N0", "N1", "N2")
_M_STAGES = ("M0", "M1")
_GRADES = ("G1", "G2", "G3")


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 32
    patches_per_slice: int = 8
    latent_dim: int = 32
    noise_scale: float = 0.25
    seed: int = 0
    embed_dim: int = 64
    channels: tuple[str, ...] = DEFAULT_CHANNELS
    patch_size: int = 256

    def __post_init__(self):
        if self.latent_dim < 2:
            raise ArgumentError("latent_dim must be at least 2")
        if self.n_patients < 1 or self.patches_per_slice < 1:
            raise ArgumentError("cohort dimensions must be positive")
        if self.embed_dim < self.latent_dim:
            raise ArgumentError("embed_dim must be at least latent_dim")


@dataclass(frozen=True)
class SynthCohort:
    dataset: Dataset
    embeddings: dict  # modality -> EmbeddingMatrix (raw encoder features)
    latents: np.ndarray  # per-patch shared latent vectors


def _bucket(value, options):
    """Map a standard-normal coordinate to an option deterministically."""
    idx = int(np.clip(np.floor((value + 2.5) / 5.0 * len(options)), 0, len(options) - 1))
    return options[idx]


def _metadata_from_latent(v):
    months = float(np.round(6.0 + 30.0 * abs(v[5 % len(v)]), 1))
    return ClinicalMetadata(
        organ_type=_bucket(v[0], _ORGANS),
        disease=_bucket(v[0], _DISEASES),
        tissue_type=_bucket(v[1], _TISSUES),
        t_stage=_bucket(v[2 % len(v)], _T_STAGES),
        n_stage=_bucket(v[3 % len(v)], _N_STAGES),
        m_stage=_bucket(v[4 % len(v)], _M_STAGES),
        grade=_bucket(v[2 % len(v)], _GRADES),
        survival_status="Deceased" if v[6 % len(v)] < 0 else "Alive",
        survival_months=months,
        treatment_response=bool(v[7 % len(v)] > 0),
    )


def synth_cohort(config):
    """Generate a deterministic tri-modal cohort around shared latents.

    Each patch holds one latent u; the three modality feature rows are
    Q u + noise_scale * eps with a single orthonormal map Q shared across
    modalities, so at noise 0 paired rows are identical (maximal cosine)
    while independent per-modality noise keeps the alignment task
    non-trivial.  Uses the counter-based Philox generator, so output is
    reproducible across runs and platforms.
    """
    cfg = config
    rng = np.random.Generator(np.random.Philox(key=np.uint64(cfg.seed)))

    # orthonormal columns shared by all modalities
    basis = np.linalg.qr(rng.standard_normal((cfg.embed_dim, cfg.latent_dim)))[0]
    abundance_map = rng.standard_normal((len(cfg.channels), cfg.latent_dim)) / np.sqrt(cfg.latent_dim)

    slices, patches, latents = [], [], []
    features = {m: [] for m in MODALITIES}
    ids = []
    p = cfg.patch_size
    for pi in range(cfg.n_patients):
        patient_latent = rng.standard_normal(cfg.latent_dim)
        metadata = _metadata_from_latent(patient_latent)
        slice_id = f"S{pi:04d}"
        slices.append(SliceRecord(
            slice_id=slice_id,
            patient_id=f"P{pi:04d}",
            channel_names=cfg.channels,
            metadata=metadata,
        ))
        for ki in range(cfg.patches_per_slice):
            u = patient_latent + 0.5 * rng.standard_normal(cfg.latent_dim)
            latents.append(u)
            signal = basis @ u
            for m in MODALITIES:
                noise = cfg.noise_scale * rng.standard_normal(cfg.embed_dim)
                features[m].append(signal + noise)
            mu = np.clip(128.0 + 40.0 * (abundance_map @ u), 0.0, 255.0)
            patch_id = f"{slice_id}_K{ki:04d}"
            ids.append(patch_id)
            coord = PatchCoord(0, p, ki * p, (ki + 1) * p)
            patches.append(PatchRecord(patch_id, slice_id, coord, mu))

    dataset = Dataset(tuple(slices), tuple(patches))
    embeddings = {
        m: EmbeddingMatrix(m, np.asarray(features[m], dtype=np.float32), tuple(ids))
        for m in MODALITIES
    }
    return SynthCohort(dataset, embeddings, np.asarray(latents))
