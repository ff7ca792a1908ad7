"""Synthetic chair-like shapes with ground-truth part labels.

Each part is a set of parameterized surface-sampled primitives (boxes and
cylinders) with an existence probability. Shapes are sampled to 2048
points, normalized to the unit bounding cube, and partitioned into
super-segments by nearest-primitive assignment, which gives the pipeline
a stand-in for externally produced convex decompositions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from sklearn.cluster import KMeans

from .errors import InvalidInputError
from .geometry import (
    MODEL_POINT_COUNT,
    PartLabels,
    PointCloud,
    ShapeRecord,
    SuperSegmentSet,
)


@dataclass
class Primitive:
    """An axis-aligned surface primitive.

    kind 'box': size = (sx, sy, sz) full extents.
    kind 'cylinder': size = (radius, radius, height), axis along z.
    """

    kind: str
    center: np.ndarray
    size: np.ndarray

    def area(self) -> float:
        sx, sy, sz = self.size
        if self.kind == "box":
            return 2.0 * (sx * sy + sy * sz + sx * sz)
        r, _, h = self.size
        return 2.0 * np.pi * r * h + 2.0 * np.pi * r * r

    def sample_surface(self, count: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "box":
            pts = _sample_box_surface(count, self.size, rng)
        elif self.kind == "cylinder":
            pts = _sample_cylinder_surface(count, self.size, rng)
        else:
            raise InvalidInputError(f"unknown primitive kind {self.kind!r}")
        return pts + self.center


def _sample_box_surface(count, size, rng):
    sx, sy, sz = size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=count, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=count)
    v = rng.uniform(-0.5, 0.5, size=count)
    pts = np.empty((count, 3))
    half = np.array([sx, sy, sz]) / 2.0
    for f in range(6):
        m = face == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        other = [a for a in range(3) if a != axis]
        pts[m, axis] = sign * half[axis]
        pts[m, other[0]] = u[m] * size[other[0]]
        pts[m, other[1]] = v[m] * size[other[1]]
    return pts


def _sample_cylinder_surface(count, size, rng):
    r, _, h = size
    lateral = 2.0 * np.pi * r * h
    cap = np.pi * r * r
    part = rng.choice(3, size=count, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=count)
    pts = np.empty((count, 3))
    on_side = part == 0
    pts[on_side, 0] = r * np.cos(theta[on_side])
    pts[on_side, 1] = r * np.sin(theta[on_side])
    pts[on_side, 2] = rng.uniform(-0.5, 0.5, size=on_side.sum()) * h
    for which, sign in ((1, 1.0), (2, -1.0)):
        m = part == which
        rad = r * np.sqrt(rng.uniform(0.0, 1.0, size=m.sum()))
        pts[m, 0] = rad * np.cos(theta[m])
        pts[m, 1] = rad * np.sin(theta[m])
        pts[m, 2] = sign * h / 2.0
    return pts


@dataclass
class PartTemplate:
    """One named part: an existence probability and a primitive sampler.

    ``build`` receives an rng and returns the part's primitives for one
    shape instance (positions/sizes jittered per shape).
    """

    name: str
    existence_probability: float
    build: Callable[[np.random.Generator], list[Primitive]]


@dataclass
class PartCatalog:
    category: str
    parts: list[PartTemplate] = field(default_factory=list)

    @property
    def part_names(self) -> list[str]:
        return [p.name for p in self.parts]


def _chair_seat(rng):
    t = rng.uniform(0.06, 0.2)
    if rng.random() < 0.3:
        # Round seat.
        r = rng.uniform(0.35, 0.55)
        prims = [Primitive("cylinder", np.array([0.0, 0.0, 0.0]), np.array([r, r, t]))]
    else:
        w = rng.uniform(0.6, 1.25)
        d = rng.uniform(0.6, 1.2)
        prims = [Primitive("box", np.array([0.0, 0.0, 0.0]), np.array([w, d, t]))]
    if rng.random() < 0.4:
        # Cushion on top, loosely placed.
        cw = rng.uniform(0.3, 0.8)
        cd = rng.uniform(0.3, 0.8)
        ct = rng.uniform(0.05, 0.15)
        off = rng.uniform(-0.1, 0.1, size=2)
        prims.append(
            Primitive(
                "box",
                np.array([off[0], off[1], t / 2 + ct / 2]),
                np.array([cw, cd, ct]),
            )
        )
    return prims


def _chair_back(rng):
    h = rng.uniform(0.2, 1.3)
    y = rng.uniform(-0.55, -0.3)
    z = h / 2 + rng.uniform(0.0, 0.12)
    if rng.random() < 0.35:
        # Slatted back: a few thin vertical bars.
        n = int(rng.integers(2, 5))
        t = rng.uniform(0.05, 0.09)
        span = rng.uniform(0.5, 0.9)
        xs = np.linspace(-span / 2, span / 2, n)
        prims = [
            Primitive("box", np.array([x, y, z]), np.array([t, t, h])) for x in xs
        ]
    else:
        w = rng.uniform(0.55, 1.1)
        t = rng.uniform(0.06, 0.18)
        prims = [Primitive("box", np.array([0.0, y, z]), np.array([w, t, h]))]
    if rng.random() < 0.3:
        # Headrest block above the back.
        hw = rng.uniform(0.25, 0.6)
        hh = rng.uniform(0.1, 0.25)
        prims.append(
            Primitive(
                "box",
                np.array([0.0, y, z + h / 2 + hh / 2 + rng.uniform(0.0, 0.08)]),
                np.array([hw, rng.uniform(0.08, 0.16), hh]),
            )
        )
    return prims


def _chair_leg(rng):
    h = rng.uniform(0.3, 1.0)
    z = -h / 2 - rng.uniform(0.02, 0.1)
    if rng.random() < 0.25:
        # Pedestal base: one thick central column, sometimes with a foot disk.
        r = rng.uniform(0.07, 0.14)
        legs = [Primitive("cylinder", np.array([0.0, 0.0, z]), np.array([r, r, h]))]
        if rng.random() < 0.6:
            fr = rng.uniform(0.25, 0.45)
            legs.append(
                Primitive(
                    "cylinder",
                    np.array([0.0, 0.0, z - h / 2]),
                    np.array([fr, fr, rng.uniform(0.04, 0.08)]),
                )
            )
        return legs
    kind = "box" if rng.random() < 0.4 else "cylinder"
    r = rng.uniform(0.025, 0.09)
    inset = rng.uniform(0.28, 0.48)
    legs = []
    for sx in (-inset, inset):
        for sy in (-inset, inset):
            size = np.array([r, r, h]) if kind == "cylinder" else np.array([2 * r, 2 * r, h])
            legs.append(Primitive(kind, np.array([sx, sy, z]), size))
    # Stretcher bars between legs at random heights and orientations.
    n_bars = int(rng.integers(0, 3))
    for _ in range(n_bars):
        bz = z + rng.uniform(-0.35, 0.35) * h
        bt = rng.uniform(0.03, 0.07)
        if rng.random() < 0.5:
            legs.append(
                Primitive(
                    "box",
                    np.array([0.0, rng.choice([-inset, inset]), bz]),
                    np.array([2 * inset, bt, bt]),
                )
            )
        else:
            legs.append(
                Primitive(
                    "box",
                    np.array([rng.choice([-inset, inset]), 0.0, bz]),
                    np.array([bt, 2 * inset, bt]),
                )
            )
    return legs


def _chair_arm(rng):
    # Size varies down to small stubs so that arm presence is hard to read
    # from a uniform average over segments but easy from focused attention.
    l = rng.uniform(0.2, 0.9)
    t = rng.uniform(0.03, 0.12)
    z = rng.uniform(0.15, 0.45)
    x = rng.uniform(0.4, 0.58)
    with_support = rng.random() < 0.5
    sides = (-x, x) if rng.random() < 0.8 else (rng.choice([-x, x]),)
    arms = []
    for sx in sides:
        arms.append(Primitive("box", np.array([sx, 0.0, z]), np.array([t, l, t])))
        if with_support:
            arms.append(
                Primitive(
                    "box",
                    np.array([sx, rng.uniform(-0.1, 0.25), z / 2]),
                    np.array([t, t, z]),
                )
            )
    return arms


def default_chair_catalog() -> PartCatalog:
    """Chair with usually-present back, seat, and legs and an optional arm
    (the one genuinely optional chair part). Every part is absent in at
    least a tenth of shapes so each one can anchor a reference game;
    a part no game ever mentions would leave its attention query without
    any training gradient."""
    return PartCatalog(
        category="chair",
        parts=[
            PartTemplate("back", 0.82, _chair_back),
            PartTemplate("seat", 0.88, _chair_seat),
            PartTemplate("leg", 0.88, _chair_leg),
            PartTemplate("arm", 0.5, _chair_arm),
        ],
    )


def generate_synthetic_shapes(
    catalog: PartCatalog,
    count: int,
    seed: int,
    points_per_shape: int = MODEL_POINT_COUNT,
    reps_per_primitive: int = 64,
    segments_per_primitive: int = 3,
    point_noise: float = 0.01,
) -> list[ShapeRecord]:
    """Sample ``count`` shapes with gt labels and nearest-primitive segments.

    Each primitive is subdivided into ``segments_per_primitive`` spatial
    clusters so a shape yields a few dozen super-segments rather than one
    per primitive; smaller segments stay purer at part contacts.
    """
    if len(catalog.parts) < 2:
        raise InvalidInputError("catalog must define at least 2 part types")
    if count < 1:
        raise InvalidInputError("count must be >= 1")
    shapes = []
    seeds = np.random.SeedSequence(seed).spawn(count)
    for i, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        prims: list[Primitive] = []
        prim_part: list[int] = []
        for k, part in enumerate(catalog.parts):
            if rng.random() < part.existence_probability:
                for prim in part.build(rng):
                    prims.append(prim)
                    prim_part.append(k)
        if not prims:
            # Seat-like anchor parts have probability 1 in sensible catalogs;
            # still, guarantee at least the first part exists.
            for prim in catalog.parts[0].build(rng):
                prims.append(prim)
                prim_part.append(0)
        areas = np.array([p.area() for p in prims])
        owner = rng.choice(len(prims), size=points_per_shape, p=areas / areas.sum())
        pts = np.empty((points_per_shape, 3))
        for j, prim in enumerate(prims):
            m = owner == j
            if m.any():
                pts[m] = prim.sample_surface(int(m.sum()), rng)
        # Per-shape anisotropic stretch plus surface jitter: no two shapes
        # share geometry, which keeps the reference game from being solved
        # by memorizing a small set of part appearances.
        pts = pts * rng.uniform(0.7, 1.3, size=3)
        if point_noise > 0:
            pts = pts + rng.normal(0.0, point_noise, size=pts.shape)
        # Normalize to the unit bounding cube centered at the origin.
        center = (pts.min(axis=0) + pts.max(axis=0)) / 2.0
        pts = pts - center
        scale = max(np.abs(pts).max() * 2.0, 1e-9)
        pts = pts / scale
        labels = np.array([prim_part[j] for j in owner], dtype=np.int64)
        # Segment each primitive's points independently so segments never
        # straddle primitives: cluster a representative surface sample and
        # attach every point to its nearest cluster within its primitive.
        assignment = np.empty(points_per_shape, dtype=np.int64)
        next_seg = 0
        for j, prim in enumerate(prims):
            m = owner == j
            if not m.any():
                continue
            member_pts = pts[m]
            n_clusters = min(segments_per_primitive, len(member_pts))
            if n_clusters <= 1:
                assignment[m] = next_seg
                next_seg += 1
                continue
            prim_reps = (prim.sample_surface(reps_per_primitive, rng) - center) / scale
            km = KMeans(
                n_clusters=n_clusters,
                n_init=1,
                max_iter=50,
                random_state=int(rng.integers(1 << 31)),
            ).fit(prim_reps)
            d = np.linalg.norm(
                member_pts[:, None, :] - km.cluster_centers_[None, :, :], axis=2
            )
            local = d.argmin(axis=1)
            # Compact: some clusters may catch no points.
            kept = np.unique(local)
            remap = {c: next_seg + r for r, c in enumerate(kept)}
            assignment[m] = np.array([remap[c] for c in local])
            next_seg += len(kept)
        cloud = PointCloud(pts.astype(np.float32))
        segs = SuperSegmentSet.from_assignment(
            f"synth-{seed}-{i:05d}", assignment, rng_seed=int(rng.integers(1 << 31))
        )
        shapes.append(
            ShapeRecord(
                id=f"synth-{seed}-{i:05d}",
                category=catalog.category,
                cloud=cloud,
                segments=segs,
                gt=PartLabels(labels=labels, part_names=catalog.part_names),
            )
        )
    return shapes
