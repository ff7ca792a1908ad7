"""Colored PLY export of per-point part predictions."""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError

# Fixed palette; indexable by part id, wraps around past 8 parts.
PALETTE = np.array(
    [
        [31, 119, 180],
        [255, 127, 14],
        [44, 160, 44],
        [214, 39, 40],
        [148, 103, 189],
        [140, 86, 75],
        [227, 119, 194],
        [127, 127, 127],
    ],
    dtype=np.uint8,
)


def part_colors(labels: np.ndarray) -> np.ndarray:
    return PALETTE[np.asarray(labels) % len(PALETTE)]


def write_colored_ply(path, points: np.ndarray, labels: np.ndarray) -> None:
    """ASCII PLY with uchar RGB per vertex, colored by part id."""
    points = np.asarray(points, dtype=np.float32)
    labels = np.asarray(labels)
    if points.ndim != 2 or points.shape[1] != 3:
        raise InvalidInputError("points must be N x 3")
    if labels.shape[0] != points.shape[0]:
        raise InvalidInputError("labels must match point count")
    colors = part_colors(labels)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(points)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write("end_header\n")
        for p, c in zip(points, colors):
            f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}\n")


def read_ply_vertex_count(path) -> int:
    with open(path) as f:
        for line in f:
            if line.startswith("element vertex"):
                return int(line.split()[-1])
    raise InvalidInputError("no vertex element in PLY header")
