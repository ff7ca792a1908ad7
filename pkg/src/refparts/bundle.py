"""Dataset bundle serialization.

A bundle is a directory:

    manifest.json   shape ids, categories, part names, per-shape byte offsets
    points.bin      magic 'PGB1', then per shape: u32 N, N*3 float32 LE
    segments.bin    magic 'PGB1', then per shape: u32 S, N u32 assignments
    labels.bin      optional; magic 'PGB1', then per shape: N u32 labels

Arrays are concatenated in manifest order. Round-trips are bit-exact for
coordinates and assignments.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import BundleFormatError, InvalidInputError
from .geometry import PartLabels, PointCloud, ShapeRecord, SuperSegmentSet

MAGIC = b"PGB1"


def write_bundle(path, shapes: list[ShapeRecord]) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    part_names: list[str] = []
    for rec in shapes:
        if rec.gt is not None:
            if part_names and part_names != rec.gt.part_names:
                raise InvalidInputError("inconsistent part-name tables across shapes")
            part_names = rec.gt.part_names
    has_labels = any(rec.gt is not None for rec in shapes)
    if has_labels and not all(rec.gt is not None for rec in shapes):
        raise InvalidInputError("either all shapes or no shapes may carry labels")

    offsets = {"points": [], "segments": [], "labels": []}
    with open(path / "points.bin", "wb") as fp, open(path / "segments.bin", "wb") as fs:
        fp.write(MAGIC)
        fs.write(MAGIC)
        fl = open(path / "labels.bin", "wb") if has_labels else None
        if fl:
            fl.write(MAGIC)
        try:
            for rec in shapes:
                n = len(rec.cloud)
                offsets["points"].append(fp.tell())
                fp.write(struct.pack("<I", n))
                fp.write(rec.cloud.points.astype("<f4").tobytes())
                offsets["segments"].append(fs.tell())
                fs.write(struct.pack("<I", rec.segments.num_segments))
                fs.write(rec.segments.assignment.astype("<u4").tobytes())
                if fl:
                    offsets["labels"].append(fl.tell())
                    fl.write(rec.gt.labels.astype("<u4").tobytes())
        finally:
            if fl:
                fl.close()
    manifest = {
        "shape_ids": [rec.id for rec in shapes],
        "categories": [rec.category for rec in shapes],
        "part_names": part_names,
        "offsets": offsets,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def _check_magic(buf: bytes, name: str) -> None:
    if buf[:4] != MAGIC:
        raise BundleFormatError(f"{name}: bad magic bytes", offset=0)


def read_bundle(path) -> list[ShapeRecord]:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise BundleFormatError(f"missing manifest.json in {path}")
    manifest = json.loads(manifest_path.read_text())
    ids = manifest["shape_ids"]
    categories = manifest["categories"]
    part_names = manifest.get("part_names") or []

    points_buf = (path / "points.bin").read_bytes()
    segments_buf = (path / "segments.bin").read_bytes()
    _check_magic(points_buf, "points.bin")
    _check_magic(segments_buf, "segments.bin")
    labels_buf = None
    if (path / "labels.bin").exists():
        labels_buf = (path / "labels.bin").read_bytes()
        _check_magic(labels_buf, "labels.bin")

    shapes = []
    for i, shape_id in enumerate(ids):
        off = manifest["offsets"]["points"][i]
        try:
            (n,) = struct.unpack_from("<I", points_buf, off)
        except struct.error:
            raise BundleFormatError("points.bin: truncated point count", offset=off)
        end = off + 4 + n * 12
        if end > len(points_buf):
            raise BundleFormatError(
                f"points.bin: shape {shape_id!r} needs {n} points past end of file",
                offset=off,
            )
        pts = np.frombuffer(points_buf, dtype="<f4", count=n * 3, offset=off + 4)
        cloud = PointCloud(pts.reshape(n, 3).copy())

        soff = manifest["offsets"]["segments"][i]
        try:
            (s,) = struct.unpack_from("<I", segments_buf, soff)
        except struct.error:
            raise BundleFormatError("segments.bin: truncated segment count", offset=soff)
        if soff + 4 + n * 4 > len(segments_buf):
            raise BundleFormatError(
                f"segments.bin: shape {shape_id!r} assignment truncated", offset=soff
            )
        assignment = np.frombuffer(
            segments_buf, dtype="<u4", count=n, offset=soff + 4
        ).astype(np.int64)
        if assignment.size and assignment.max() >= s:
            raise BundleFormatError(
                f"segments.bin: shape {shape_id!r} assignment exceeds segment count",
                offset=soff,
            )
        segs = SuperSegmentSet.from_assignment(
            shape_id, assignment, rng_seed=_stable_seed(shape_id)
        )

        gt = None
        if labels_buf is not None:
            loff = manifest["offsets"]["labels"][i]
            if loff + n * 4 > len(labels_buf):
                raise BundleFormatError(
                    f"labels.bin: shape {shape_id!r} labels truncated", offset=loff
                )
            labels = np.frombuffer(labels_buf, dtype="<u4", count=n, offset=loff).astype(
                np.int64
            )
            gt = PartLabels(labels=labels, part_names=part_names)
        shapes.append(
            ShapeRecord(id=shape_id, category=categories[i], cloud=cloud, segments=segs, gt=gt)
        )
    return shapes


def _stable_seed(shape_id: str) -> int:
    """Deterministic per-shape seed for the 512-point segment cap."""
    h = 2166136261
    for ch in shape_id.encode():
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
    return h % (1 << 31)
