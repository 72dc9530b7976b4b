"""Vector datasets: manifest + blob I/O, split planning and pool selection.

A dataset on disk is three files sharing a stem::

    data.csv    image_id,patient_id,role,source_patient_id
    data.json   {"dimension": d, "space": "latent", "blob_path": "data.pvf", "count": n}
    data.pvf    16-byte header (b"PVF1", u32 count, u32 dimension, u32 0) + f32 rows
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text

BLOB_MAGIC = b"PVF1"
_BLOB_HEADER = struct.Struct("<4sIII")

SPACES = ("pixel", "latent")
ROLES = (
    "ref_train",
    "ref_validation",
    "holdout_seen_patient",
    "holdout_unseen_patient",
    "synthetic",
)
# "" marks a real image whose role is decided by build_split.
MANIFEST_ROLES = ("",) + ROLES
MANIFEST_HEADER = ["image_id", "patient_id", "role", "source_patient_id"]
POOLS = ("reference_train", "combined", "same_patient")


class ManifestError(ValueError):
    """Raised when a manifest or its vector blob fails validation."""


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    patient_id: str
    vector: np.ndarray
    space: str
    role: str = ""
    source_patient_id: str | None = None


@dataclass
class DatasetManifest:
    dimension: int
    space: str
    image_ids: list[str]
    patient_ids: list[str]
    roles: list[str]
    source_patient_ids: list[str | None]
    vectors: np.ndarray  # (count, dimension) float32, possibly memory-mapped
    blob_path: Path | None = None
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._index:
            self._index = {iid: i for i, iid in enumerate(self.image_ids)}

    def __len__(self) -> int:
        return len(self.image_ids)

    def index_of(self, image_id: str) -> int:
        return self._index[image_id]

    def record(self, i: int, role: str | None = None) -> ImageRecord:
        return ImageRecord(
            image_id=self.image_ids[i],
            patient_id=self.patient_ids[i],
            vector=self.vectors[i],
            space=self.space,
            role=self.roles[i] if role is None else role,
            source_patient_id=self.source_patient_ids[i],
        )

    def records(self) -> list[ImageRecord]:
        return [self.record(i) for i in range(len(self))]


def validate_manifest(m: DatasetManifest) -> None:
    """Check every invariant of ``m``; errors name the offending record index."""
    if m.space not in SPACES:
        raise ManifestError(f"unknown space {m.space!r}")
    if m.dimension < 2:
        raise ManifestError(f"dimension must be > 1, got {m.dimension}")
    n = len(m.image_ids)
    if not (len(m.patient_ids) == len(m.roles) == len(m.source_patient_ids) == n):
        raise ManifestError("manifest columns have unequal lengths")
    if m.vectors.ndim != 2 or m.vectors.shape[1] != m.dimension:
        raise ManifestError(
            f"dimension mismatch: vectors have shape {m.vectors.shape}, "
            f"manifest dimension is {m.dimension}"
        )
    if m.vectors.shape[0] != n:
        raise ManifestError(
            f"row count {n} does not match vector count {m.vectors.shape[0]}"
        )
    seen: dict[str, int] = {}
    for i in range(n):
        iid = m.image_ids[i]
        if not iid:
            raise ManifestError(f"record {i}: empty image_id")
        if iid in seen:
            raise ManifestError(
                f"record {i}: duplicate image_id {iid!r} (first at record {seen[iid]})"
            )
        seen[iid] = i
        if not m.patient_ids[i]:
            raise ManifestError(f"record {i} ({iid}): empty patient_id")
        if m.roles[i] not in MANIFEST_ROLES:
            raise ManifestError(f"record {i} ({iid}): unknown role {m.roles[i]!r}")
        if m.source_patient_ids[i] and m.roles[i] != "synthetic":
            raise ManifestError(
                f"record {i} ({iid}): source_patient_id set on a non-synthetic record"
            )
    finite = np.isfinite(m.vectors).all(axis=1)
    if not finite.all():
        i = int(np.flatnonzero(~finite)[0])
        raise ManifestError(f"record {i} ({m.image_ids[i]}): non-finite vector value")


def _sidecar_and_csv(path: Path) -> tuple[Path, Path]:
    path = Path(path)
    return path.with_suffix(".json"), path.with_suffix(".csv")


def read_blob(path: Path, mmap: bool = True) -> np.ndarray:
    path = Path(path)
    size = path.stat().st_size
    if size < _BLOB_HEADER.size:
        raise ManifestError(f"{path}: truncated blob (no header)")
    with open(path, "rb") as fh:
        magic, count, dim, reserved = _BLOB_HEADER.unpack(fh.read(_BLOB_HEADER.size))
    if magic != BLOB_MAGIC:
        raise ManifestError(f"{path}: bad magic {magic!r}")
    if reserved != 0:
        raise ManifestError(f"{path}: reserved header field is {reserved}, expected 0")
    expected = _BLOB_HEADER.size + 4 * count * dim
    if size < expected:
        have = (size - _BLOB_HEADER.size) // (4 * dim) if dim else 0
        raise ManifestError(
            f"{path}: truncated blob: header declares {count} records, "
            f"record {have} is incomplete"
        )
    if count == 0:
        return np.zeros((0, dim), dtype="<f4")
    if mmap:
        return np.memmap(path, dtype="<f4", mode="r", offset=_BLOB_HEADER.size,
                         shape=(count, dim))
    with open(path, "rb") as fh:
        fh.seek(_BLOB_HEADER.size)
        return np.frombuffer(fh.read(4 * count * dim), dtype="<f4").reshape(count, dim)


def blob_bytes(vectors: np.ndarray) -> bytes:
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    count, dim = vectors.shape
    return _BLOB_HEADER.pack(BLOB_MAGIC, count, dim, 0) + vectors.tobytes()


def load_manifest(manifest_path: str | Path, mmap: bool = True) -> DatasetManifest:
    """Load and validate a manifest given the path of its CSV or JSON sidecar."""
    sidecar_path, csv_path = _sidecar_and_csv(Path(manifest_path))
    try:
        meta = json.loads(sidecar_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ManifestError(f"missing manifest sidecar {sidecar_path}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{sidecar_path}: {exc}") from exc
    for key in ("dimension", "space", "blob_path", "count"):
        if key not in meta:
            raise ManifestError(f"{sidecar_path}: missing key {key!r}")

    ids, pids, roles, sources = [], [], [], []
    try:
        with open(csv_path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != MANIFEST_HEADER:
                raise ManifestError(f"{csv_path}: bad header {header}")
            for row in reader:
                if not row:
                    continue
                if len(row) != 4:
                    raise ManifestError(
                        f"record {len(ids)}: expected 4 columns, got {len(row)}"
                    )
                ids.append(row[0])
                pids.append(row[1])
                roles.append(row[2])
                sources.append(row[3] or None)
    except FileNotFoundError as exc:
        raise ManifestError(f"missing manifest csv {csv_path}") from exc

    if len(ids) != int(meta["count"]):
        raise ManifestError(
            f"manifest lists {len(ids)} records but sidecar count is {meta['count']}"
        )
    blob_path = sidecar_path.parent / meta["blob_path"]
    if not blob_path.exists():
        raise ManifestError(f"missing vector blob {blob_path}")
    vectors = read_blob(blob_path, mmap=mmap)
    if vectors.shape[1] != int(meta["dimension"]):
        raise ManifestError(
            f"dimension mismatch: blob has {vectors.shape[1]}, "
            f"sidecar declares {meta['dimension']}"
        )
    if vectors.shape[0] < len(ids):
        raise ManifestError(
            f"truncated blob: {vectors.shape[0]} records for {len(ids)} manifest rows "
            f"(record {vectors.shape[0]} missing)"
        )
    if vectors.shape[0] > len(ids):
        raise ManifestError(
            f"blob holds {vectors.shape[0]} records but manifest lists {len(ids)}"
        )
    m = DatasetManifest(
        dimension=int(meta["dimension"]),
        space=meta["space"],
        image_ids=ids,
        patient_ids=pids,
        roles=roles,
        source_patient_ids=sources,
        vectors=vectors,
        blob_path=blob_path,
    )
    validate_manifest(m)
    return m


def write_manifest(m: DatasetManifest, manifest_path: str | Path) -> Path:
    """Write ``m`` as csv + json sidecar + blob next to ``manifest_path``."""
    validate_manifest(m)
    sidecar_path, csv_path = _sidecar_and_csv(Path(manifest_path))
    blob_path = csv_path.with_suffix(".pvf")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_HEADER)
    for iid, pid, role, src in zip(m.image_ids, m.patient_ids, m.roles,
                                   m.source_patient_ids):
        w.writerow([iid, pid, role, src or ""])
    meta = {
        "dimension": m.dimension,
        "space": m.space,
        "blob_path": blob_path.name,
        "count": len(m),
    }
    atomic_write_bytes(blob_path, blob_bytes(m.vectors))
    atomic_write_text(csv_path, buf.getvalue())
    atomic_write_text(sidecar_path, json.dumps(meta, indent=2) + "\n")
    return csv_path


def make_manifest(
    records: Sequence[tuple[str, str, Iterable[float]]],
    space: str = "latent",
    roles: Sequence[str] | None = None,
    sources: Sequence[str | None] | None = None,
) -> DatasetManifest:
    """Build an in-memory manifest from ``(image_id, patient_id, vector)`` rows."""
    vectors = np.asarray([np.asarray(r[2], dtype=np.float32) for r in records],
                         dtype=np.float32)
    if vectors.ndim == 1:
        vectors = vectors.reshape(len(records), -1)
    n = len(records)
    m = DatasetManifest(
        dimension=vectors.shape[1],
        space=space,
        image_ids=[r[0] for r in records],
        patient_ids=[r[1] for r in records],
        roles=list(roles) if roles is not None else [""] * n,
        source_patient_ids=list(sources) if sources is not None else [None] * n,
        vectors=vectors,
    )
    validate_manifest(m)
    return m


# --------------------------------------------------------------------------
# Split planning
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    seed: int
    roles: dict[str, str]  # image_id -> role

    def ids_with_role(self, role: str) -> list[str]:
        return [iid for iid, r in self.roles.items() if r == role]

    def patients_with_role(self, manifest: DatasetManifest, role: str) -> list[str]:
        return sorted({manifest.patient_ids[manifest.index_of(iid)]
                       for iid in self.ids_with_role(role)})

    def to_csv(self) -> str:
        lines = [f"# seed={self.seed}", "image_id,role"]
        lines += [f"{iid},{role}" for iid, role in self.roles.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "SplitPlan":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("# seed="):
            raise ValueError("split plan must start with '# seed=<u64>'")
        seed = int(lines[0][len("# seed="):])
        if lines[1:2] != ["image_id,role"]:
            raise ValueError("split plan missing 'image_id,role' header")
        roles = {}
        for n, line in enumerate(lines[2:]):
            if not line:
                continue
            iid, role = line.rsplit(",", 1)
            if role not in ROLES:
                raise ValueError(f"split plan row {n}: unknown role {role!r}")
            roles[iid] = role
        return cls(seed=seed, roles=roles)

    def save(self, path: str | Path) -> None:
        atomic_write_text(Path(path), self.to_csv())

    @classmethod
    def load(cls, path: str | Path) -> "SplitPlan":
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))


def check_plan(manifest: DatasetManifest, plan: SplitPlan) -> None:
    """Raise ValueError unless ``plan`` is a valid role partition of ``manifest``."""
    if set(plan.roles) != set(manifest.image_ids):
        raise ValueError("split plan does not cover exactly the manifest's images")
    by_patient: dict[str, set[str]] = {}
    for iid, role in plan.roles.items():
        i = manifest.index_of(iid)
        if (role == "synthetic") != (manifest.roles[i] == "synthetic"):
            raise ValueError(f"{iid}: synthetic role mismatch between plan and manifest")
        if role != "synthetic":
            by_patient.setdefault(manifest.patient_ids[i], set()).add(role)
    for pid, roles in by_patient.items():
        if "holdout_unseen_patient" in roles and roles != {"holdout_unseen_patient"}:
            raise ValueError(f"patient {pid}: unseen patient also has roles {roles}")


def build_split(
    manifest: DatasetManifest,
    seed: int,
    unseen_fraction: float = 0.0,
    validation_fraction: float = 0.1,
    max_sensitivity_patients: int | None = None,
) -> SplitPlan:
    """Assign every image a role.

    Patients are shuffled with ``seed``; the first ``round(unseen_fraction * P)``
    become unseen holdout patients. Every remaining patient with k >= 2 images
    (up to ``max_sensitivity_patients``) puts ceil(k/2) images in ``ref_train``
    and the rest in ``holdout_seen_patient``. Remaining single-image patients are
    split between ``ref_validation`` (``validation_fraction``) and ``ref_train``.
    Synthetic records keep their role.
    """
    if not 0.0 <= unseen_fraction <= 1.0:
        raise ValueError(f"unseen_fraction must be in [0, 1], got {unseen_fraction}")
    if not 0.0 <= validation_fraction <= 1.0:
        raise ValueError(
            f"validation_fraction must be in [0, 1], got {validation_fraction}"
        )
    images: dict[str, list[str]] = {}
    for iid, pid, role in zip(manifest.image_ids, manifest.patient_ids, manifest.roles):
        if role != "synthetic":
            images.setdefault(pid, []).append(iid)
    patients = sorted(images)
    if not any(len(images[p]) >= 2 for p in patients):
        raise ValueError("no patient with at least 2 images; cannot build a split")

    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    n_unseen = int(round(unseen_fraction * len(order)))
    unseen = set(order[:n_unseen])
    rest = order[n_unseen:]
    multi = [p for p in rest if len(images[p]) >= 2]
    if not multi:
        raise ValueError(
            "unseen_fraction leaves no multi-image patient for the sensitivity protocol"
        )
    if max_sensitivity_patients is not None:
        multi = multi[:max_sensitivity_patients]
    sensitivity = set(multi)
    singles = [p for p in rest if len(images[p]) == 1]
    n_val = int(round(validation_fraction * len(singles)))
    validation = set(singles[:n_val])

    assigned: dict[str, str] = {}
    for p in patients:
        ids = sorted(images[p])
        if p in unseen:
            for iid in ids:
                assigned[iid] = "holdout_unseen_patient"
        elif p in sensitivity:
            perm = rng.permutation(len(ids))
            n_train = math.ceil(len(ids) / 2)
            for rank, j in enumerate(perm):
                assigned[ids[j]] = "ref_train" if rank < n_train else "holdout_seen_patient"
        elif p in validation:
            assigned[ids[0]] = "ref_validation"
        else:
            for iid in ids:
                assigned[iid] = "ref_train"

    roles = {}
    for iid, role in zip(manifest.image_ids, manifest.roles):
        roles[iid] = "synthetic" if role == "synthetic" else assigned[iid]
    return SplitPlan(seed=int(seed), roles=roles)


def sensitivity_patients(manifest: DatasetManifest, plan: SplitPlan) -> list[str]:
    return plan.patients_with_role(manifest, "holdout_seen_patient")


def select_pool(
    manifest: DatasetManifest,
    plan: SplitPlan,
    pool: str = "combined",
    patient_id: str | None = None,
) -> list[ImageRecord]:
    """Return the reference images a query is compared against.

    ``combined`` is every ``ref_train`` image. ``reference_train`` excludes the
    training half of sensitivity patients. ``same_patient`` keeps only
    ``patient_id``'s ``ref_train`` images.
    """
    if pool not in POOLS:
        raise ValueError(f"unknown pool {pool!r}; expected one of {POOLS}")
    if pool == "same_patient":
        if patient_id is None:
            raise ValueError("same_patient pool requires a patient_id")
        if patient_id not in set(manifest.patient_ids):
            raise KeyError(f"unknown patient_id {patient_id!r}")
    excluded = set(sensitivity_patients(manifest, plan)) if pool == "reference_train" else set()
    out = []
    for i, iid in enumerate(manifest.image_ids):
        if plan.roles[iid] != "ref_train":
            continue
        pid = manifest.patient_ids[i]
        if pool == "same_patient" and pid != patient_id:
            continue
        if pid in excluded:
            continue
        out.append(manifest.record(i, role="ref_train"))
    return out


def records_with_role(manifest: DatasetManifest, plan: SplitPlan,
                      role: str) -> list[ImageRecord]:
    return [manifest.record(i, role=role) for i, iid in enumerate(manifest.image_ids)
            if plan.roles[iid] == role]
