"""On-disk formats: the BRLPVOL1 volume file and the cohort manifest CSV.

Volume file layout (little-endian, 32-byte header):
    bytes 0..7    magic b"BRLPVOL1"
    bytes 8..19   3 x u32   dims (depth, height, width)
    bytes 20..31  3 x f32   spacing_mm (depth, height, width)
    bytes 32..    depth*height*width f32 voxels, row-major, width fastest

The manifest is a plain CSV with a fixed header; volume paths are stored
relative to the manifest's own directory.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .covariates import REGIONS, SEXES, STATUSES, Covariates
from .grids import VolumeGrid

VOLUME_MAGIC = b"BRLPVOL1"
_HEADER = struct.Struct("<8s3I3f")
MAX_DIM = 4096

MANIFEST_COLUMNS = ("subject_id", "visit_age", "sex", "diagnosis", "volume_path") + REGIONS


class VolumeFormatError(Exception):
    """Raised when a volume file does not parse as BRLPVOL1."""


def write_volume(volume: VolumeGrid, path: str | Path) -> None:
    d, h, w = volume.shape
    payload = np.ascontiguousarray(volume.data, dtype="<f4")
    header = _HEADER.pack(VOLUME_MAGIC, d, h, w, *volume.spacing_mm)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_volume(path: str | Path) -> VolumeGrid:
    with open(path, "rb") as fh:
        raw_header = fh.read(_HEADER.size)
        if len(raw_header) < _HEADER.size:
            raise VolumeFormatError(f"{path}: truncated header ({len(raw_header)} bytes)")
        magic, d, h, w, sz, sy, sx = _HEADER.unpack(raw_header)
        if magic != VOLUME_MAGIC:
            raise VolumeFormatError(f"{path}: bad magic {magic!r}")
        for n in (d, h, w):
            if n == 0 or n > MAX_DIM:
                raise VolumeFormatError(f"{path}: dimension {n} outside [1, {MAX_DIM}]")
        n_vox = d * h * w
        payload = fh.read(4 * n_vox)
        if len(payload) < 4 * n_vox:
            raise VolumeFormatError(
                f"{path}: truncated payload ({len(payload)} of {4 * n_vox} bytes)"
            )
    data = np.frombuffer(payload, dtype="<f4").reshape(d, h, w).copy()
    return VolumeGrid(data=data, spacing_mm=(sz, sy, sx))


@dataclass(frozen=True)
class ManifestRow:
    subject_id: str
    visit_age: float
    sex: str
    diagnosis: str
    volume_path: str  # relative to the manifest directory
    fractions: dict[str, float]

    def covariates(self) -> Covariates:
        return Covariates(
            age_years=self.visit_age,
            sex=self.sex,
            cognitive_status=self.diagnosis,
            region_fractions=self.fractions,
        )


@dataclass
class Manifest:
    """Cohort index: per-visit rows plus the directory paths resolve against."""

    rows: list[ManifestRow]
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)
        per_subject: dict[str, list[float]] = {}
        for row in self.rows:
            per_subject.setdefault(row.subject_id, []).append(row.visit_age)
        for sid, ages in per_subject.items():
            if len(ages) < 2:
                raise ValueError(f"subject {sid} has {len(ages)} visit(s); need >= 2")
            if any(b <= a for a, b in zip(ages, ages[1:])):
                raise ValueError(f"subject {sid} visit ages not strictly increasing: {ages}")

    def subjects(self) -> list[str]:
        seen: dict[str, None] = {}
        for row in self.rows:
            seen.setdefault(row.subject_id)
        return list(seen)

    def visits(self, subject_id: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.subject_id == subject_id]

    def resolve(self, row: ManifestRow) -> Path:
        return self.root / row.volume_path

    def validate_paths(self) -> None:
        for row in self.rows:
            p = self.resolve(row)
            if not p.exists():
                raise FileNotFoundError(f"manifest references missing volume: {p}")


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for row in manifest.rows:
            writer.writerow(
                [row.subject_id, f"{row.visit_age:.6f}", row.sex, row.diagnosis, row.volume_path]
                + [f"{row.fractions[r]:.10f}" for r in REGIONS]
            )


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    rows: list[ManifestRow] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_COLUMNS:
            raise ValueError(f"{path}: unexpected manifest header {header}")
        for rec in reader:
            if len(rec) != len(MANIFEST_COLUMNS):
                raise ValueError(f"{path}: bad manifest row {rec}")
            sid, age, sex, dx, vol_path, *fracs = rec
            if sex not in SEXES or dx not in STATUSES:
                raise ValueError(f"{path}: bad sex/diagnosis in row for {sid}")
            rows.append(
                ManifestRow(
                    subject_id=sid,
                    visit_age=float(age),
                    sex=sex,
                    diagnosis=dx,
                    volume_path=vol_path,
                    fractions={r: float(f) for r, f in zip(REGIONS, fracs)},
                )
            )
    return Manifest(rows=rows, root=path.parent)
