"""Bit-exact on-disk formats: MVOL1 volumes, NPCK1 checkpoints, JSON manifests.

All multi-byte fields are little-endian. MVOL1 stores voxel data x-fastest
(then y, then z); NPCK1 stores tensors row-major (last index fastest) as f32.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DimensionError, FormatError

VOLUME_MAGIC = b"MVOL1"
CHECKPOINT_MAGIC = b"NPCK1"
_VOLUME_HEADER = struct.Struct("<5sB3I3fB")  # magic, dtype, dims, voxel_mm, modality


class Modality(enum.Enum):
    T1 = 0
    FLAIR = 1
    MASK = 2
    MAP = 3


@dataclass
class Volume:
    """A 3D scalar grid with voxel-size metadata, indexed ``data[x, y, z]``."""

    data: np.ndarray
    voxel_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: Modality = Modality.T1

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DimensionError(f"volume data must be 3D, got shape {self.data.shape}")
        if any(d <= 0 for d in self.data.shape):
            raise DimensionError(f"volume dims must be positive, got {self.data.shape}")
        self.voxel_mm = tuple(float(v) for v in self.voxel_mm)
        if len(self.voxel_mm) != 3 or any(v <= 0 for v in self.voxel_mm):
            raise ConfigError(f"voxel_mm must be three positive reals, got {self.voxel_mm}")
        if self.modality is Modality.MASK:
            if not np.all((self.data == 0) | (self.data == 1)):
                raise DataError("MASK volume contains values other than 0/1")
        elif self.modality is Modality.MAP:
            if np.any(self.data < 0) or not np.all(self.data == np.round(self.data)):
                raise DataError("MAP volume must contain non-negative integers")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


def write_volume(v: Volume, path) -> None:
    """Serialize a volume; MASK payloads use u8, everything else f32."""
    use_u8 = v.modality is Modality.MASK
    header = _VOLUME_HEADER.pack(
        VOLUME_MAGIC, 1 if use_u8 else 0, *v.dims, *v.voxel_mm, v.modality.value
    )
    payload = np.ascontiguousarray(v.data.T)  # C-order over (z, y, x) == x-fastest
    payload = payload.astype("u1" if use_u8 else "<f4")
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes())


def read_volume(path) -> Volume:
    buf = Path(path).read_bytes()
    if len(buf) < _VOLUME_HEADER.size:
        raise FormatError(f"volume header truncated: {len(buf)} bytes", offset=len(buf))
    magic, dtype_byte, dx, dy, dz, vx, vy, vz, modality_byte = _VOLUME_HEADER.unpack_from(buf)
    if magic != VOLUME_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {VOLUME_MAGIC!r}", offset=0)
    if dtype_byte not in (0, 1):
        raise FormatError(f"unknown dtype byte {dtype_byte}", offset=5)
    try:
        modality = Modality(modality_byte)
    except ValueError:
        raise FormatError(f"unknown modality byte {modality_byte}", offset=30) from None
    count = dx * dy * dz
    itemsize = 4 if dtype_byte == 0 else 1
    expected = _VOLUME_HEADER.size + count * itemsize
    if len(buf) != expected:
        raise FormatError(
            f"payload length mismatch: expected {expected} bytes, got {len(buf)}",
            offset=min(len(buf), expected),
        )
    raw = np.frombuffer(buf, dtype="<f4" if dtype_byte == 0 else "u1",
                        count=count, offset=_VOLUME_HEADER.size)
    data = np.ascontiguousarray(raw.reshape(dz, dy, dx).transpose(2, 1, 0))
    return Volume(data=data, voxel_mm=(vx, vy, vz), modality=modality)


@dataclass
class ModelCheckpoint:
    """Ordered named-tensor container; names are unique, payloads are f32."""

    entries: list[tuple[str, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        names = [name for name, _ in self.entries]
        if len(names) != len(set(names)):
            raise DataError("checkpoint entry names must be unique")
        self.entries = [
            (name, np.asarray(tensor, dtype=np.float32)) for name, tensor in self.entries
        ]

    def names(self):
        return [name for name, _ in self.entries]

    def get(self, name: str) -> np.ndarray:
        for entry_name, tensor in self.entries:
            if entry_name == name:
                return tensor
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(entry_name == name for entry_name, _ in self.entries)

    def __len__(self):
        return len(self.entries)


def write_checkpoint(c: ModelCheckpoint, path) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(c.entries))]
    for name, tensor in c.entries:
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def read_checkpoint(path) -> ModelCheckpoint:
    buf = Path(path).read_bytes()
    if len(buf) < 9:
        raise FormatError(f"checkpoint header truncated: {len(buf)} bytes", offset=len(buf))
    if buf[:5] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {buf[:5]!r}, expected {CHECKPOINT_MAGIC!r}", offset=0)
    (count,) = struct.unpack_from("<I", buf, 5)
    offset = 9
    entries = []
    seen = set()
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", buf, offset)
            offset += 2
            if len(buf) < offset + name_len:
                raise struct.error
            name = buf[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", buf, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", buf, offset)
            offset += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            end = offset + 4 * size
            if end > len(buf):
                raise FormatError(
                    f"tensor payload truncated: expected {end} bytes, got {len(buf)}",
                    offset=len(buf),
                )
            tensor = np.frombuffer(buf, dtype="<f4", count=size, offset=offset).reshape(dims)
            offset = end
        except struct.error:
            raise FormatError("checkpoint truncated mid-entry", offset=offset) from None
        if name in seen:
            raise FormatError(f"duplicate checkpoint entry {name!r}", offset=offset)
        seen.add(name)
        entries.append((name, tensor.copy()))
    if offset != len(buf):
        raise FormatError(
            f"{len(buf) - offset} trailing bytes after last entry", offset=offset
        )
    return ModelCheckpoint(entries=entries)


@dataclass
class CaseRecord:
    case_id: str
    input_volume_path: str
    truth_mask_path: str
    second_input_path: str | None = None
    split_tag: str = "all"


@dataclass
class Manifest:
    records: list[CaseRecord] = field(default_factory=list)

    def __post_init__(self):
        ids = [r.case_id for r in self.records]
        if len(ids) != len(set(ids)):
            raise DataError("manifest case_ids must be unique")

    def __len__(self):
        return len(self.records)


def load_manifest(path) -> Manifest:
    """Read a manifest; relative paths resolve against the manifest directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("records"), list):
        raise DataError(f"manifest {path} must contain a 'records' list")
    base = path.parent
    records = []
    for idx, rec in enumerate(doc["records"]):
        if not isinstance(rec, dict):
            raise DataError(f"manifest record {idx} is not an object")
        try:
            case_id = rec["case_id"]
            input_path = rec["input_volume_path"]
            truth_path = rec["truth_mask_path"]
        except KeyError as exc:
            raise DataError(f"manifest record {idx} missing field {exc}") from None
        second = rec.get("second_input_path")
        resolved = CaseRecord(
            case_id=str(case_id),
            input_volume_path=str((base / input_path).resolve()),
            truth_mask_path=str((base / truth_path).resolve()),
            second_input_path=str((base / second).resolve()) if second else None,
            split_tag=str(rec.get("split_tag", "all")),
        )
        for p in (resolved.input_volume_path, resolved.truth_mask_path,
                  resolved.second_input_path):
            if p is not None and not Path(p).is_file():
                raise DataError(f"manifest case {resolved.case_id!r}: missing file {p}")
        records.append(resolved)
    return Manifest(records=records)


def write_manifest(m: Manifest, path) -> None:
    path = Path(path)
    base = path.resolve().parent

    def rel(p):
        if p is None:
            return None
        try:
            return str(Path(p).resolve().relative_to(base))
        except ValueError:
            return str(p)

    doc = {
        "records": [
            {
                "case_id": r.case_id,
                "input_volume_path": rel(r.input_volume_path),
                "second_input_path": rel(r.second_input_path),
                "truth_mask_path": rel(r.truth_mask_path),
                "split_tag": r.split_tag,
            }
            for r in m.records
        ]
    }
    path.write_text(json.dumps(doc, indent=2) + "\n")


def kfold_split(m: Manifest, k: int, seed: int) -> list[tuple[Manifest, Manifest]]:
    """Deterministic k-fold partition; fold sizes differ by at most one."""
    if k < 2:
        raise ConfigError(f"k must be at least 2, got {k}")
    if k > len(m.records):
        raise ConfigError(f"k={k} exceeds the {len(m.records)} manifest records")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(m.records))
    folds = np.array_split(order, k)
    splits = []
    for i in range(k):
        test_idx = set(folds[i].tolist())
        train = [m.records[j] for j in range(len(m.records)) if j not in test_idx]
        test = [m.records[j] for j in sorted(test_idx)]
        splits.append((Manifest(records=train), Manifest(records=test)))
    return splits


def cross_study_split(m: Manifest) -> list[tuple[str, str, Manifest, Manifest]]:
    """Both train/test directions across the manifest's two split tags."""
    tags = sorted({r.split_tag for r in m.records})
    if len(tags) != 2:
        raise DataError(f"cross-study split needs exactly two split tags, found {tags}")
    groups = {tag: [r for r in m.records if r.split_tag == tag] for tag in tags}
    a, b = tags
    return [
        (a, b, Manifest(records=groups[a]), Manifest(records=groups[b])),
        (b, a, Manifest(records=groups[b]), Manifest(records=groups[a])),
    ]
