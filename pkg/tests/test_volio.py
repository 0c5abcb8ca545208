"""Volume file format and manifest round trips."""

import numpy as np
import pytest

from brainprog.covariates import REGIONS
from brainprog.grids import VolumeGrid
from brainprog.volio import (
    Manifest,
    ManifestRow,
    VolumeFormatError,
    read_manifest,
    read_volume,
    write_manifest,
    write_volume,
)


def _vol(shape=(6, 5, 4), seed=0):
    rng = np.random.default_rng(seed)
    return VolumeGrid(
        data=rng.uniform(0, 1, shape).astype(np.float32), spacing_mm=(1.5, 1.5, 1.5)
    )


def test_round_trip_bit_identical(tmp_path):
    vol = _vol()
    path = tmp_path / "v.vol"
    write_volume(vol, path)
    back = read_volume(path)
    assert back.data.tobytes() == vol.data.tobytes()
    assert back.spacing_mm == vol.spacing_mm
    assert back.shape == vol.shape


def test_file_size_arithmetic(tmp_path):
    vol = VolumeGrid(data=np.zeros((32, 32, 32), dtype=np.float32))
    path = tmp_path / "v.vol"
    write_volume(vol, path)
    assert path.stat().st_size == 32 + 4 * 32**3


def test_corrupted_magic_is_format_error(tmp_path):
    path = tmp_path / "v.vol"
    write_volume(_vol(), path)
    raw = bytearray(path.read_bytes())
    raw[:8] = b"NOTAVOL!"
    path.write_bytes(bytes(raw))
    with pytest.raises(VolumeFormatError, match="bad magic"):
        read_volume(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "v.vol"
    write_volume(_vol(), path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 10])
    with pytest.raises(VolumeFormatError, match="truncated payload"):
        read_volume(path)


def test_truncated_header(tmp_path):
    path = tmp_path / "v.vol"
    path.write_bytes(b"BRLPVOL1\x01")
    with pytest.raises(VolumeFormatError, match="truncated header"):
        read_volume(path)


def test_dimension_overflow(tmp_path):
    import struct

    path = tmp_path / "v.vol"
    header = struct.pack("<8s3I3f", b"BRLPVOL1", 1, 100_000, 1, 1.0, 1.0, 1.0)
    path.write_bytes(header + b"\x00" * 64)
    with pytest.raises(VolumeFormatError, match="dimension"):
        read_volume(path)


def _rows():
    fr = {r: 0.1 for r in REGIONS}
    return [
        ManifestRow("S0", 64.0, "female", "CN", "vols/S0_v0.vol", dict(fr)),
        ManifestRow("S0", 66.0, "female", "CN", "vols/S0_v1.vol", dict(fr)),
    ]


def test_manifest_round_trip(tmp_path):
    m = Manifest(rows=_rows(), root=tmp_path)
    write_manifest(m, tmp_path / "manifest.csv")
    back = read_manifest(tmp_path / "manifest.csv")
    assert len(back.rows) == 2
    assert back.rows[0].subject_id == "S0"
    assert back.rows[1].visit_age == pytest.approx(66.0)
    assert back.rows[0].fractions == {r: pytest.approx(0.1) for r in REGIONS}


def test_manifest_requires_two_increasing_visits(tmp_path):
    with pytest.raises(ValueError, match="need >= 2"):
        Manifest(rows=_rows()[:1], root=tmp_path)
    bad = _rows()
    object.__setattr__(bad[1], "visit_age", 64.0)
    with pytest.raises(ValueError, match="strictly increasing"):
        Manifest(rows=bad, root=tmp_path)


def test_manifest_bad_header(tmp_path):
    path = tmp_path / "manifest.csv"
    path.write_text("not,a,manifest\n1,2,3\n")
    with pytest.raises(ValueError, match="header"):
        read_manifest(path)


def test_manifest_missing_volume_flagged(tmp_path):
    m = Manifest(rows=_rows(), root=tmp_path)
    with pytest.raises(FileNotFoundError):
        m.validate_paths()
