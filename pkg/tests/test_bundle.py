import json

import numpy as np
import pytest

from refparts.bundle import read_bundle, write_bundle
from refparts.errors import BundleFormatError
from refparts.synthetic import default_chair_catalog, generate_synthetic_shapes


@pytest.fixture(scope="module")
def shapes():
    return generate_synthetic_shapes(default_chair_catalog(), 3, seed=42)


def test_empty_bundle_roundtrip(tmp_path):
    write_bundle(tmp_path / "b", [])
    assert read_bundle(tmp_path / "b") == []


def test_roundtrip_bit_exact(tmp_path, shapes):
    write_bundle(tmp_path / "b", shapes)
    back = read_bundle(tmp_path / "b")
    assert len(back) == len(shapes)
    for a, b in zip(shapes, back):
        assert a.id == b.id and a.category == b.category
        np.testing.assert_array_equal(a.cloud.points, b.cloud.points)
        np.testing.assert_array_equal(a.segments.assignment, b.segments.assignment)
        np.testing.assert_array_equal(a.gt.labels, b.gt.labels)
        assert a.gt.part_names == b.gt.part_names


def test_bad_magic_rejected(tmp_path, shapes):
    write_bundle(tmp_path / "b", shapes)
    p = tmp_path / "b" / "points.bin"
    data = bytearray(p.read_bytes())
    data[:4] = b"XXXX"
    p.write_bytes(bytes(data))
    with pytest.raises(BundleFormatError):
        read_bundle(tmp_path / "b")


def test_corrupt_point_count_is_format_error(tmp_path, shapes):
    write_bundle(tmp_path / "b", shapes)
    manifest = json.loads((tmp_path / "b" / "manifest.json").read_text())
    off = manifest["offsets"]["points"][0]
    p = tmp_path / "b" / "points.bin"
    data = bytearray(p.read_bytes())
    data[off : off + 4] = (2**31).to_bytes(4, "little")
    p.write_bytes(bytes(data))
    with pytest.raises(BundleFormatError) as exc:
        read_bundle(tmp_path / "b")
    assert exc.value.offset == off


def test_missing_manifest(tmp_path):
    (tmp_path / "b").mkdir()
    with pytest.raises(BundleFormatError):
        read_bundle(tmp_path / "b")
